macro_rules! example_test {
    ($module:ident, $file:literal) => {
        mod $module {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
        }

        #[test]
        fn $module() {
            $module::run_example().expect(concat!($file, " should run"));
        }
    };
}

example_test!(self_drafting, "self_drafting.rs");
example_test!(ngram_reuse, "ngram_reuse.rs");
example_test!(partial_cache, "partial_cache.rs");
example_test!(tree_verify, "tree_verify.rs");
example_test!(contextual_penalty, "contextual_penalty.rs");
example_test!(lossless_check, "lossless_check.rs");
example_test!(cost_model, "cost_model.rs");
example_test!(trace_report, "trace_report.rs");
example_test!(bench_cli, "bench_cli.rs");
