use std::path::Path;
use std::process::Command;

fn ivasep(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_ivasep"))
        .args(args)
        .env_remove("IVASEP_DATA")
        .env_remove("IVASEP_WEIGHTS")
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, sources: &str, seed: &str) {
    let code = ivasep(&[
        "simulate", "--out", p(dir), "--sources", sources, "--train", "4", "--val", "2", "--test", "4", "--seed", seed, "--duration",
        "0.5",
    ]);
    assert_eq!(code, 0);
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate(&a, "2", "7");
    simulate(&b, "2", "7");
    let manifest = std::fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    assert_eq!(manifest, std::fs::read_to_string(b.join("manifest.jsonl")).unwrap());
    for name in ["item00000_mix.wav", "item00009_ref1.wav"] {
        assert_eq!(std::fs::read(a.join("items").join(name)).unwrap(), std::fs::read(b.join("items").join(name)).unwrap());
    }
}

#[test]
fn missing_output_is_a_usage_error() {
    assert_eq!(ivasep(&["simulate", "--sources", "2"]), 2);
    assert_eq!(ivasep(&["frobnicate"]), 2);
    assert_eq!(ivasep(&["--help"]), 0);
}

#[test]
fn separate_writes_sources_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data, "2", "1");
    let items = data.join("items");
    let out = dir.path().join("out");
    let code = ivasep(&[
        "separate",
        p(&items.join("item00000_mix.wav")),
        "--out",
        p(&out),
        "--frame",
        "512",
        "--iters",
        "20",
        "--refs",
        p(&items.join("item00000_ref0.wav")),
        p(&items.join("item00000_ref1.wav")),
    ]);
    assert_eq!(code, 0);
    assert!(out.join("source0.wav").is_file() && out.join("source1.wav").is_file());
    let rows = csv_rows(&out.join("trace.csv"));
    assert_eq!(rows.len(), 21 * 2);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn bad_requests_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data, "3", "2");
    let mix = data.join("items").join("item00000_mix.wav");
    let out = dir.path().join("out");
    assert_eq!(ivasep(&["separate", p(&mix), "--out", p(&out), "--algo", "ip2"]), 2);
    assert_eq!(ivasep(&["separate", p(&mix), "--out", p(&out), "--model", "glu"]), 2);
    assert_eq!(ivasep(&["separate", p(&dir.path().join("missing.wav")), "--out", p(&out)]), 3);
    assert_eq!(ivasep(&["eval", "--data", p(&dir.path().join("nowhere")), "--out", p(&dir.path().join("t.csv"))]), 3);
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data, "2", "3");
    let weights = dir.path().join("w.ssma");
    let log = dir.path().join("train.jsonl");
    let code = ivasep(&[
        "train", "--data", p(&data), "--out", p(&weights), "--log", p(&log), "--lr", "0", "--epochs", "2", "--iters", "3", "--frame", "64",
        "--hidden", "4",
    ]);
    assert_eq!(code, 0);
    let vals: Vec<f64> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["split"] == "val")
        .map(|v| v["value"].as_f64().unwrap())
        .collect();
    assert_eq!(vals.len(), 3);
    assert!(vals.iter().all(|&v| v == vals[0]));

    let table = dir.path().join("table.csv");
    let code = ivasep(&[
        "eval", "--data", p(&data), "--out", p(&table), "--model", "glu", "--weights", p(&weights), "--iters", "3",
    ]);
    assert_eq!(code, 0);
    let rows = csv_rows(&table);
    assert_eq!(rows.len(), 4 + 1);
    assert_eq!(&rows[4][0], "median");
    // frame size comes from the archive; a conflicting one is rejected
    let code = ivasep(&[
        "eval", "--data", p(&data), "--out", p(&table), "--model", "glu", "--weights", p(&weights), "--frame", "512",
    ]);
    assert_eq!(code, 2);
}
