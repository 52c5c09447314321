fn main() {
    std::process::exit(swiftdec::cli::run(std::env::args_os()));
}
