use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sofa(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sofa"));
    cmd.args(args).env("SOURCE_DATE_EPOCH", "1700000000");
    for (flag, path) in paths {
        cmd.arg(flag).arg(path);
    }
    cmd.output().expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn invalid_config_reports_every_issue() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"community": {"generate": {"n_agents": 20}}, "rounds": 0, "policy": {"default_fraction": 1.5}}"#,
    )
    .unwrap();
    let out = sofa(&["run"], &[("--config", &path), ("--out-dir", &dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/policy/default_fraction"), "{err}");
    assert!(err.contains("/rounds"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.json");
    fs::write(&path, r#"{"community": {"generate": {"n_agents": 20}}, "roundz": 2}"#).unwrap();
    let out = sofa(&["run"], &[("--config", &path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("roundz"));
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("cartel.json");
    let out = sofa(&["run"], &[("--config", &cfg), ("--out-dir", dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["funding_per_round.csv", "transfers.csv", "metrics.json", "integrity_report.json", "manifest.json"] {
        assert!(dir.path().join(file).is_file(), "{file}");
    }

    let report = sofa(&["report"], &[("--config", &cfg), ("--out-dir", dir.path())]);
    assert_eq!(report.status.code(), Some(0));
    let v = stdout_json(&report);
    assert_eq!(v["run"]["manifest_ok"], true);
    let gini = v["run"]["metrics"]["gini"].as_f64().unwrap();
    let stored: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!((gini - stored["gini"].as_f64().unwrap()).abs() < 1e-6);

    // Editing an output breaks the manifest check.
    let funding = dir.path().join("funding_per_round.csv");
    let mut text = fs::read_to_string(&funding).unwrap();
    text.push('\n');
    fs::write(&funding, text).unwrap();
    let v = stdout_json(&sofa(&["report"], &[("--config", &cfg), ("--out-dir", dir.path())]));
    assert_eq!(v["run"]["manifest_ok"], false);
}

#[test]
fn audit_flags_the_planted_ring() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("cartel.json");
    sofa(&["run"], &[("--config", &cfg), ("--out-dir", dir.path())]);
    let audit_dir = dir.path().join("audit");
    let out = sofa(
        &["audit"],
        &[("--config", &cfg), ("--transfers", &dir.path().join("transfers.csv")), ("--out-dir", &audit_dir)],
    );
    assert_eq!(out.status.code(), Some(4));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("agent-003, agent-017, agent-042"), "{text}");
    assert!(audit_dir.join("integrity_report.json").is_file());
}

#[test]
fn verify_agrees_with_closed_form() {
    let out = sofa(&["verify"], &[("--config", &config("cartel.json"))]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["agree"], true);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("two_phase.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let run = sofa(&["run"], &[("--config", &cfg), ("--out-dir", out)]);
        assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("cartel.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    sofa(&["run", "--seed", "1"], &[("--config", &cfg), ("--out-dir", &a)]);
    sofa(&["run", "--seed", "2"], &[("--config", &cfg), ("--out-dir", &b)]);
    assert_ne!(fs::read(a.join("transfers.csv")).unwrap(), fs::read(b.join("transfers.csv")).unwrap());
}

#[test]
fn occupied_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".sofa.lock"), "").unwrap();
    let out = sofa(&["run"], &[("--config", &config("cartel.json")), ("--out-dir", dir.path())]);
    assert_ne!(out.status.code(), Some(0));
    assert!(!dir.path().join("funding_per_round.csv").exists());
}

#[test]
fn sweep_writes_one_row_per_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let out = sofa(
        &["sweep", "--fractions", "0,0.3,0.6"],
        &[("--config", &config("cartel.json")), ("--out-dir", dir.path())],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("f=0.000 gini=0.000000"));
}

#[test]
fn generate_writes_a_loadable_community() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("people.json");
    let out = sofa(&["generate", "--n-agents", "25", "--seed", "3"], &[("--output", &path)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["agents"].as_array().map(Vec::len), Some(25));
}

#[test]
fn partitioned_run_writes_one_directory_per_domain() {
    let dir = tempfile::tempdir().unwrap();
    let out = sofa(&["run"], &[("--config", &config("domains.json")), ("--out-dir", dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("manifest.json").is_file());
    let subdirs = fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(subdirs, 2);
}
