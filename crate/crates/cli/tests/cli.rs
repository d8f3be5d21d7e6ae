use std::path::Path;
use std::process::{Command, Output};

fn sybilfs(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sybilfs")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn run_into(dir: &Path) {
    sybilfs(&["run", "--seed", "4", "--k", "3", "--t-ms", "800", "--n-calls", "90", "--duration-ms", "2500", "--out", dir.to_str().unwrap()]);
}

#[test]
fn run_is_reproducible_and_auditable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_into(&a);
    run_into(&b);
    for f in ["report.json", "observation.jsonl", "lineage.jsonl", "p_curve.dat", "mi.dat"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let audit = sybilfs(&["audit", a.join("lineage.jsonl").to_str().unwrap(), "--t-ms", "800"]);
    assert!(String::from_utf8_lossy(&audit.stdout).contains("\"first_violation\": null"));
    let report = sybilfs(&["report", a.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&report.stdout).contains("K=3"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(&cfg, "k = 6\nworkload = \"churn\"\nduration_ms = 1500\nseed = 9\n").unwrap();
    let out = tmp.path().join("o");
    sybilfs(&["run", "--config", cfg.to_str().unwrap(), "--k", "2", "--out", out.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["k"], 2);
    assert_eq!(report["config"]["workload"], "churn");
    assert_eq!(report["config"]["seed"], 9);
}

#[test]
fn mkcorpus_attack_and_mi() {
    let tmp = tempfile::tempdir().unwrap();
    sybilfs(&["mkcorpus", "--out", tmp.path().to_str().unwrap()]);
    for w in ["query", "historian", "credloader", "churn"] {
        assert!(tmp.path().join(format!("{w}.jsonl")).exists(), "{w}");
    }
    let a: serde_json::Value =
        serde_json::from_slice(&sybilfs(&["attack", "--k", "10", "--n", "50", "--trials", "20000"]).stdout).unwrap();
    assert!((a["rate"].as_f64().unwrap() - a["expected"].as_f64().unwrap()).abs() < 0.02);
    let m: serde_json::Value = serde_json::from_slice(&sybilfs(&["mi", "--samples", "2000"]).stdout).unwrap();
    assert!(m["mi_post"].as_f64().unwrap() < m["mi_pre"].as_f64().unwrap());
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_sybilfs")).args(["run", "--k", "0"]).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_sybilfs")).args(["audit", "/nonexistent/lineage.jsonl"]).output().unwrap();
    assert!(!out.status.success());
}
