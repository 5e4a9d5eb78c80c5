use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tactile-fscil"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_then_report_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let o = cli(&["run", "--preset", "smoke", "--seed", "4", "--out", path(&runs)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("seed 4: AA"));
    assert!(runs.join("seed_4/results.csv").exists());

    // A second run into the same directory needs --force.
    let o = cli(&["run", "--preset", "smoke", "--seed", "4", "--out", path(&runs)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));

    let csv = dir.path().join("table.csv");
    let o = cli(&["report", path(&runs), "--out", path(&csv)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("AA"));
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() >= 2);
}

#[test]
fn gen_writes_a_dataset_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = cli(&["gen", "--preset", "smoke", "--out", path(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.toml").exists());
    assert!(data.join("contexts.json").exists());
}

#[test]
fn config_files_drive_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[pseudo]\nscale = 2.0\n").unwrap();
    let o = cli(&["run", "--config", path(&cfg), "--out", path(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pseudo.scale"));

    let o = cli(&["selftest", "--config", path(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_every_term() {
    let o = cli(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    for name in ["cross-entropy", "consistency-and-magnitude", "stop-gradient-anchor", "incremental"] {
        assert!(out.contains(&format!("PASS gradcheck/{name}")), "{out}");
    }
}

#[test]
fn selftest_passes_on_the_smoke_preset() {
    let o = cli(&["selftest", "--preset", "smoke"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains(", 0 failed"));
}

#[test]
fn unknown_verbs_are_usage_errors() {
    let o = cli(&["train"]);
    assert!(!o.status.success());
}
