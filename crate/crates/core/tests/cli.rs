use std::path::Path;
use std::process::{Command, Output};

use cascade_koopman::cascade::CascadeSystem;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade-koopman"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_spec(path: &Path, sys: &CascadeSystem) {
    std::fs::write(path, serde_json::to_string(&sys.to_spec()).unwrap()).unwrap();
}

#[test]
fn generate_simulate_verify_eigs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(d, &["generate", "--layers", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let spec = d.join("cascade.json");
    assert!(spec.exists() && d.join("conditions.json").exists());
    let spec = spec.to_str().unwrap();

    let out = run(d, &["simulate", "--spec", spec, "--horizon", "50"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("errors.csv")).unwrap();
    // Long format: one row per (t, layer).
    assert_eq!(csv.lines().count(), 1 + 51 * 4);
    assert!(!csv.contains("-0e0"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checks"]["bounds_dominate"], true);

    let out = run(d, &["verify", "--spec", spec, "--horizon", "200"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);

    let out = run(d, &["eigs", "--spec", spec, "--layer", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("eigs.json").exists());
}

#[test]
fn verify_with_conjugacy_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["generate", "--layers", "3"])), 0);
    let conj = d.join("conj.json");
    std::fs::write(&conj, r#"{"kind":"polynomialDiagonal","a":[0.1,0.1,0.1]}"#).unwrap();
    let out = run(
        d,
        &[
            "verify",
            "--spec",
            d.join("cascade.json").to_str().unwrap(),
            "--conjugacy",
            conj.to_str().unwrap(),
            "--checks",
            "theorem3,theorem4",
            "--horizon",
            "200",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("theorem3") && stdout.contains("theorem4"));
}

#[test]
fn reversed_hierarchy_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = d.join("bad.json");
    write_spec(&spec, &CascadeSystem::scalar_chain(&[0.9, 0.5], &[1.0]).unwrap());
    let spec = spec.to_str().unwrap();
    assert_eq!(code(&run(d, &["simulate", "--spec", spec])), 3);
    assert_eq!(code(&run(d, &["verify", "--spec", spec])), 3);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["skipped"], true);
}

#[test]
fn malformed_input_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = d.join("broken.json");
    std::fs::write(&spec, "{ not json").unwrap();
    assert_eq!(code(&run(d, &["simulate", "--spec", spec.to_str().unwrap()])), 3);
    assert_eq!(code(&run(d, &["simulate"])), 2);
    assert_eq!(code(&run(d, &["generate", "--norm-base", "1.5"])), 1);
}

#[test]
fn repro_paper_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let out = run(d, &["--seed", "7", "repro-paper"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    }
    for name in ["errors.csv", "cascade.json", "verify.json", "eigs.json"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 9);
}
