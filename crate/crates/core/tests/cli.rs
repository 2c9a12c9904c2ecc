use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chord-bft"))
        .args(args)
        .output()
        .unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("chord-bft-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn list_scenarios_names_every_bundled_scenario() {
    let out = bin(&["list-scenarios"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = text(&out.stdout);
    for b in chord_bft::harness::BUNDLED {
        assert!(stdout.contains(b.name), "{stdout}");
    }
}

#[test]
fn run_writes_report_and_trace() {
    let dir = scratch("run");
    let out = bin(&[
        "run",
        "--scenario",
        "liveness-f",
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["passed"], true);
    assert!(!fs::read_to_string(dir.join("trace.ndjson"))
        .unwrap()
        .is_empty());
}

#[test]
fn run_accepts_a_scenario_path() {
    let dir = scratch("path");
    let file = dir.join("s.toml");
    fs::write(
        &file,
        chord_bft::harness::bundled("liveness-f").unwrap().text,
    )
    .unwrap();
    let out = bin(&[
        "run",
        "--scenario",
        file.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
}

#[test]
fn oracle_failure_exits_one_unless_warn_only() {
    let dir = scratch("mutant");
    let file = dir.join("mutant.toml");
    let base = chord_bft::harness::bundled("byz-get").unwrap().text;
    fs::write(
        &file,
        format!("{base}\n[node.service]\ncommit_threshold = 1\n"),
    )
    .unwrap();
    let path = file.to_str().unwrap();
    let out_dir = dir.join("o");
    let out = bin(&[
        "run",
        "--scenario",
        path,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).contains("MISMATCH"));
    let out = bin(&[
        "run",
        "--scenario",
        path,
        "--out",
        out_dir.to_str().unwrap(),
        "--warn-only",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stderr).contains("warning"));
}

#[test]
fn invalid_scenario_exits_two_and_names_the_constraint() {
    let dir = scratch("invalid");
    let file = dir.join("bad.toml");
    let base = chord_bft::harness::bundled("contention").unwrap().text;
    fs::write(&file, base.replace("f = 1", "f = 1\nr = 3")).unwrap();
    let out = bin(&[
        "run",
        "--scenario",
        file.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("3f+1"), "{}", text(&out.stderr));

    fs::write(&file, "name = [").unwrap();
    let out = bin(&[
        "run",
        "--scenario",
        file.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        bin(&["run", "--scenario", "contention"]).status.code(),
        Some(2)
    );
    assert_eq!(
        bin(&["run", "--scenario", "no-such-scenario", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    let dir = scratch("seeds");
    let out = bin(&[
        "sweep",
        "--scenario",
        "contention",
        "--seeds",
        "7",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_summary_table() {
    let dir = scratch("sweep");
    let out = bin(&[
        "sweep",
        "--scenario",
        "contention",
        "--seeds",
        "0..=2",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"], 3);
    assert!(text(&out.stdout).contains("3 runs, 3 passed"));
    for seed in 0..3 {
        assert!(dir.join(format!("report-{seed}.json")).exists());
    }
}
