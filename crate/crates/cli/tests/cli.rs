use std::path::Path;
use std::process::{Command, Output};

fn phaselab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phaselab")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&phaselab(&[])), 1);
    assert_eq!(code(&phaselab(&["train"])), 1);
    assert_eq!(code(&phaselab(&["train", "--plan", "p.json", "--out", "o", "--precision", "f16"])), 1);
    assert_eq!(code(&phaselab(&["--help"])), 0);
}

#[test]
fn bad_plans_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = dir.path().join("out");
    let o = phaselab(&["metrics", "--plan", s(&missing), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));

    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{\"name\": 3}").unwrap();
    assert_eq!(code(&phaselab(&["train", "--plan", s(&broken), "--out", s(&out)])), 1);

    assert_eq!(code(&phaselab(&["gen-synthetic", "--out", s(&out), "--scale", "-1"])), 1);
    assert_eq!(code(&phaselab(&["gradcheck", "--precision", "f32"])), 1);
}

#[test]
fn pipeline_runs_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    let out = dir.path().join("out");
    let plan = input.join("plan.json");
    let o = phaselab(&["gen-synthetic", "--out", s(&input), "--seed", "2", "--scale", "0.05"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["tokens"].as_u64().unwrap() > 0);

    for cmd in ["train", "metrics", "ablate", "ppp"] {
        let o = phaselab(&[cmd, "--plan", s(&plan), "--out", s(&out), "--jobs", "2"]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_slice::<serde_json::Value>(&o.stdout).unwrap();
    }
    assert!(out.join("ppp/summary.json").exists());

    // a different seed on the same output directory is a different grid cell
    let o = phaselab(&["ppp", "--plan", s(&plan), "--out", s(&out), "--seed", "5"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["skipped"].as_object().unwrap().len(), 2);
}

#[test]
fn gradcheck_passes_in_f64() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.json");
    let o = phaselab(&["gradcheck", "--instances", "3", "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(v["max_rel_error"]["regularized_loss"].as_f64().unwrap() < 1e-4);
}
