use std::fs;
use std::process::Command;

use swiftdec::metrics::{read_trace, RunMetrics};

fn swiftdec(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_swiftdec"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn ar_and_swift_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let ar = dir.path().join("ar.txt");
    let sw = dir.path().join("sw.txt");
    let common = ["generate", "--target", "100", "--seed", "7"];
    let out = swiftdec(
        &[
            &common[..],
            &["--mode", "ar", "--out", ar.to_str().unwrap()],
        ]
        .concat(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = swiftdec(
        &[
            &common[..],
            &["--mode", "swift", "--out", sw.to_str().unwrap()],
        ]
        .concat(),
    );
    assert!(out.status.success());
    let a = fs::read_to_string(&ar).unwrap();
    let s = fs::read_to_string(&sw).unwrap();
    let s: Vec<&str> = s.split_whitespace().take(100).collect();
    assert_eq!(a.split_whitespace().collect::<Vec<_>>(), s);
}

#[test]
fn missing_model_file_is_a_config_error() {
    let out = swiftdec(&["generate", "--model", "/definitely/not/here.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    let out = swiftdec(&["generate", "--budget", "10", "--sink", "10"]);
    assert_eq!(out.status.code(), Some(2));
    let out = swiftdec(&["generate", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = swiftdec(&[
        "generate",
        "--print-config",
        "--tree",
        "1,3,3,3",
        "--k",
        "20",
        "--theta",
        "1.2",
        "--window",
        "1024",
        "--top-p",
        "0.8",
        "--seed",
        "3",
        "--no-bonus",
    ]);
    assert!(first.status.success());
    let path = dir.path().join("cfg.json");
    fs::write(&path, &first.stdout).unwrap();
    let second = swiftdec(&[
        "generate",
        "--print-config",
        "--config",
        path.to_str().unwrap(),
    ]);
    assert_eq!(first.stdout, second.stdout);
    let overridden = swiftdec(&[
        "generate",
        "--print-config",
        "--config",
        path.to_str().unwrap(),
        "--k",
        "0",
    ]);
    let text = String::from_utf8(overridden.stdout).unwrap();
    assert!(text.contains("\"k\": 0"));
}

#[test]
fn default_settings_run() {
    let out = swiftdec(&[
        "generate", "--tree", "1,3,3,3", "--k", "20", "--theta", "1.2", "--window", "1024",
        "--target", "60",
    ]);
    assert!(out.status.success());
    let ids = String::from_utf8(out.stdout).unwrap();
    assert!(ids.split_whitespace().count() >= 60);
}

#[test]
fn trace_report_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let cache = dir.path().join("cache.jsonl");
    let grams = dir.path().join("grams.jsonl");
    let csv = dir.path().join("row.csv");
    let out = swiftdec(&[
        "generate",
        "--target",
        "120",
        "--sink",
        "8",
        "--budget",
        "32",
        "--trace",
        trace.to_str().unwrap(),
        "--dump-cache",
        cache.to_str().unwrap(),
        "--dump-ngrams",
        grams.to_str().unwrap(),
        "--format",
        "text",
    ]);
    assert!(out.status.success());

    let records = read_trace(fs::read_to_string(&trace).unwrap().as_bytes()).unwrap();
    let m = RunMetrics::from_trace(&records).unwrap();
    let cache_lines = fs::read_to_string(&cache).unwrap();
    assert_eq!(cache_lines.lines().count(), 2 * 32);
    let first: serde_json::Value =
        serde_json::from_str(cache_lines.lines().next().unwrap()).unwrap();
    assert!(first.get("pos").is_some() && first.get("layer").is_some());
    assert!(fs::read_to_string(&grams)
        .unwrap()
        .lines()
        .all(|l| l.contains("\"freq\"")));

    let out = swiftdec(&[
        "report",
        trace.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["alpha"].as_f64().unwrap(), m.alpha);
    assert_eq!(json["beta"].as_f64().unwrap(), m.beta);
    let row = fs::read_to_string(&csv).unwrap();
    assert!(row.starts_with("gen_len,alpha,speedup\n"));
}

#[test]
fn single_cell_bench_is_one_row() {
    let out = swiftdec(&[
        "bench",
        "--lengths",
        "80",
        "--target",
        "80",
        "--sink",
        "8",
        "--budget",
        "32",
        "--repeats",
        "2",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], swiftdec::cli::BENCH_HEADER);
    assert!(lines[1].starts_with("80,20,\"1,3,3,3\",1.2,1024,"));
    assert!(lines[1].contains('±'));
}

#[test]
fn verify_lossless_reports_identity() {
    let out = swiftdec(&[
        "verify-lossless",
        "--target",
        "80",
        "--eta",
        "0.02",
        "--seed",
        "4",
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("identical"));
}

#[test]
fn table_backend_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.cfg");
    fs::write(
        &path,
        "backend = table\nvocab_size = 40\norder = 1\nfallback = successor\ndraft = echo\n",
    )
    .unwrap();
    let out = swiftdec(&[
        "generate",
        "--model",
        path.to_str().unwrap(),
        "--target",
        "20",
        "--sink",
        "4",
        "--budget",
        "16",
        "--prompt",
        "/dev/null",
    ]);
    // An empty prompt cannot fill the sink.
    assert_eq!(out.status.code(), Some(2));
    let prompt = dir.path().join("prompt.txt");
    fs::write(&prompt, "1 2 3 4 5 6 7 8").unwrap();
    let out = swiftdec(&[
        "generate",
        "--model",
        path.to_str().unwrap(),
        "--target",
        "20",
        "--sink",
        "4",
        "--budget",
        "16",
        "--prompt",
        prompt.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let ids: Vec<u32> = String::from_utf8(out.stdout)
        .unwrap()
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(&ids[..3], &[9, 10, 11]);
}
