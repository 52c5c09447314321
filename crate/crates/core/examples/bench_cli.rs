// Driving the command line in process: a two-cell benchmark table and a
// lossless check.
//
// ```bash
// cargo run --release --example bench_cli
// ```

pub fn run_example() -> swiftdec::Result<()> {
    let code = swiftdec::cli::run([
        "swiftdec",
        "bench",
        "--lengths",
        "100,200",
        "--ks",
        "0,20",
        "--target",
        "200",
        "--sink",
        "16",
        "--budget",
        "64",
    ]);
    println!("bench exit code {code}");
    let code = swiftdec::cli::run([
        "swiftdec",
        "verify-lossless",
        "--target",
        "150",
        "--seed",
        "7",
        "--top-p",
        "0.9",
    ]);
    println!("verify-lossless exit code {code}");
    if code != swiftdec::cli::EXIT_OK {
        return Err(swiftdec::Error::Config(format!(
            "unexpected exit code {code}"
        )));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> swiftdec::Result<()> {
    run_example()
}
