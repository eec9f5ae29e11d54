//! The binary's config handling, exit codes and a short end-to-end run.

use std::path::Path;
use std::process::{Command, Output};

fn noisetrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisetrack"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn config_init_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    let o = noisetrack(&["config", "init", "--output", path(&file)]);
    assert!(o.status.success(), "{}", stderr(&o));

    // Reading it back and printing again yields the same text.
    let o = noisetrack(&["--config", path(&file), "config", "init"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), std::fs::read_to_string(&file).unwrap());
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let o = noisetrack(&["--config", path(&missing), "emulate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = noisetrack(&["pipeline", "--stages", "emulate,polish", "--output-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown stage 'polish'"), "{}", stderr(&o));

    let o = noisetrack(&["emulate", "--set", "hdfa.max_levels"]);
    assert_eq!(o.status.code(), Some(2));

    let o = noisetrack(&["emulate", "--workers", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stage_without_its_upstream_output_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = noisetrack(&["average", "--output-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("run the ingest stage first"), "{}", stderr(&o));
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn corrupt_records_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = path(dir.path());
    let o = noisetrack(&["emulate", "--output-dir", d, "--set", "plan.n_repetitions=20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let file = dir.path().join("records.tsv");
    let text = std::fs::read_to_string(&file).unwrap().replacen("\tX\t1\t", "\tX\t7\t", 1);
    std::fs::write(&file, text).unwrap();
    let o = noisetrack(&["ingest", "--output-dir", d]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("outcome"), "{}", stderr(&o));
}

#[test]
fn set_reaches_nested_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = noisetrack(&[
        "emulate",
        "--output-dir",
        path(dir.path()),
        "--set",
        "plan.n_repetitions=77",
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = std::fs::read_to_string(dir.path().join("records.tsv")).unwrap();
    let reps: Vec<&str> = records.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split('\t').nth(2).unwrap()).collect();
    assert_eq!(reps.last(), Some(&"76"));
}

#[test]
fn short_pipeline_run_succeeds_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = noisetrack(&["pipeline", "--output-dir", path(dir.path()), "--set", "plan.n_repetitions=1500"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("manifest:"), "{out}");
    for f in ["records.tsv", "trace_q0.tsv", "hdfa_q0.json", "report.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}
