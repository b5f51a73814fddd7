use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repsim")).args(args).output().unwrap()
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_audit_replay_clean() {
    let dir = tempfile::tempdir().unwrap();
    let (report, log, auth) = (dir.path().join("r.json"), dir.path().join("e.jsonl"), dir.path().join("a.json"));
    let o = repsim(&[
        "run", "--scenario", &scenario("minimal.json"), "--seed", "3", "--backend", "sim",
        "--out", s(&report), "--log", s(&log), "--authority-out", s(&auth),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(repsim(&["audit", "--log", s(&log)]).status.code(), Some(0));
    assert_eq!(repsim(&["audit", "--log", s(&log), "--reveal-authority", s(&auth)]).status.code(), Some(0));
    assert_eq!(repsim(&["replay", "--log", s(&log), "--report", s(&report)]).status.code(), Some(0));
}

#[test]
fn findings_exit_two_and_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (report, log) = (dir.path().join("r.json"), dir.path().join("e.jsonl"));
    let o = repsim(&[
        "run", "--scenario", &scenario("faults/token_replay.json"), "--out", s(&report), "--log", s(&log),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let audit = repsim(&["audit", "--log", s(&log)]);
    assert_eq!(audit.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&audit.stdout).unwrap();
    assert_eq!(v["findings"].as_array().unwrap().len(), 1);

    let text = std::fs::read_to_string(&log).unwrap();
    let cut = dir.path().join("cut.jsonl");
    std::fs::write(&cut, text.lines().take(5).collect::<Vec<_>>().join("\n")).unwrap();
    assert_eq!(repsim(&["audit", "--log", s(&cut)]).status.code(), Some(1));
    assert_eq!(repsim(&["run", "--scenario", s(&dir.path().join("missing.json"))]).status.code(), Some(1));
}

#[test]
fn bench_then_extrapolate() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.json");
    let o = repsim(&["bench", "--iters", "30", "--out", s(&t)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = repsim(&["extrapolate", "--timings", s(&t), "--businesses", "1000", "--rate", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["ratings_per_second"].as_f64().unwrap() > 0.0);
    assert_eq!(repsim(&["bench", "--iters", "3", "--out", s(&t)]).status.code(), Some(1));
    assert_eq!(
        repsim(&["extrapolate", "--timings", s(&t), "--businesses", "10", "--rate=-1"]).status.code(),
        Some(1)
    );
    assert_eq!(repsim(&["extrapolate", "--rate", "-1"]).status.code(), Some(1));
    assert_eq!(repsim(&["--help"]).status.code(), Some(0));
}
