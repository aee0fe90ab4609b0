use std::path::Path;
use std::process::{Command, Output};

fn ipp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipp"))
        .args(args)
        .current_dir(dir)
        .env("IPP_THREADS", "2")
        .output()
        .expect("run ipp")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ipp(dir, args);
    assert!(
        out.status.success(),
        "ipp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Collect, estimate, train and sweep into `dir`.
fn pipeline(dir: &Path) {
    ok(dir, &["collect", "--policy", "random", "--episodes", "30", "--seed", "4", "--out", "rand"]);
    ok(dir, &["estimate", "--logs", "rand", "--out", "."]);
    ok(dir, &[
        "collect", "--policy", "planner", "--episodes", "2", "--seed", "5", "--budget-samples", "16",
        "--max-ticks", "120", "--dynamics", "dynamics.json", "--out", "play",
    ]);
    ok(dir, &["train-prior", "--logs", "play", "--epochs", "1", "--seed", "6", "--out", "."]);
    ok(dir, &[
        "sweep", "--budget-samples", "4,16", "--episodes", "2", "--max-ticks", "120", "--seed", "7",
        "--dynamics", "dynamics.json", "--weights", "prior.ippw", "--out", "sweep",
    ]);
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for f in ["dynamics.json", "prior.ippw", "loss.csv", "sweep/sweep.csv", "rand/episode_0000.jsonl", "play/episode_0001.frames"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let csv = std::fs::read_to_string(a.path().join("sweep/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "agent,budget_kind,budget,mean_score,std,seed");
    // two agents by two budgets
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.ends_with(",7")));
    let loss = std::fs::read_to_string(a.path().join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,loss"));
    assert_eq!(loss.lines().count(), 2);
}

#[test]
fn eval_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &[
        "eval", "--agent", "pb-uniform", "--budget-samples", "8", "--episodes", "2", "--max-ticks", "50",
        "--ground-truth", "--out", "e",
    ]);
    assert!(out.starts_with("pb-uniform samples=8 episodes=2"), "{out}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("e/eval.json")).unwrap()).unwrap();
    assert_eq!(json["agent"], "pb-uniform");
    assert_eq!(json["scores"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("e/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"no_such_field": 1}"#).unwrap();
    for args in [
        &["eval", "--config", "bad.json"][..],
        &["eval", "--agent", "pb-dqn"],
        &["collect", "--policy", "greedy"],
        &["collect", "--episodes", "0"],
        &["eval", "--budget-samples", "0", "--ground-truth"],
        &["estimate"],
    ] {
        assert_eq!(ipp(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn missing_artifacts_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["eval", "--agent", "pb-cnn", "--ground-truth"][..],
        &["eval", "--agent", "pb-cnn", "--ground-truth", "--weights", "nope.ippw"],
        &["eval", "--agent", "pb-uniform", "--dynamics", "nope.json"],
    ] {
        let out = ipp(dir.path(), args);
        assert_eq!(out.status.code(), Some(3), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
