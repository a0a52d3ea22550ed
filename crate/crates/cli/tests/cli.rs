use std::path::Path;
use std::process::{Command, Output};

fn dsqn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsqn")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

const TINY: &str = r#"
seed = 4

[env]
name = "catch"

[network]
arch = "4C3S1-LIF-Flatten-16-LIF-NA-LI"
init_gain = 6.0

[hyper]
warmup = 100
epsilon_anneal_steps = 300
target_sync = 100

[train]
total_steps = 600
eval_interval = 200
eval_episodes = 5
checkpoint_interval = 300
"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn case_study_csv_matches_neural_coding_claims() {
    let dir = tempfile::tempdir().unwrap();
    let out = dsqn(&[
        "case-study",
        "--t",
        "8",
        "--tau",
        "2.0",
        "--i-min",
        "0",
        "--i-max",
        "3",
        "--steps",
        "300",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("case_study.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("I,last_mem,max_mem,mean_mem"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 301);
    assert_eq!(rows[0], vec![0.0, 0.0, 0.0, 0.0]);
    assert!(rows.windows(2).all(|w| w[1][2] >= w[0][2]), "max_mem must be non-decreasing");
    assert!(rows.windows(2).any(|w| w[1][1] < w[0][1]), "last_mem should drop somewhere");

    let stdout = dsqn(&["case-study", "--steps", "10"]);
    assert_eq!(code(&stdout), 0);
    assert_eq!(String::from_utf8_lossy(&stdout.stdout).lines().count(), 12);
    assert_eq!(code(&dsqn(&["case-study", "--i-min", "2", "--i-max", "1"])), 2);
}

#[test]
fn grad_check_exit_codes() {
    let ok = dsqn(&["grad-check", "--trials", "100", "--seed", "7"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let summary = json(&ok);
    assert_eq!(summary["trials"], 100);
    assert!(summary["max_oracle_error"].as_f64().unwrap() <= 1e-10);
    assert!(summary["max_fd_error"].as_f64().unwrap() <= 1e-4);

    let corrupt = dsqn(&["grad-check", "--trials", "20", "--seed", "7", "--corrupt-surrogate"]);
    assert_eq!(code(&corrupt), 1);
    assert_eq!(json(&corrupt)["passed"], false);

    assert_eq!(code(&dsqn(&["grad-check", "--trials", "0"])), 2);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&dsqn(&["train"])), 2);
    assert_eq!(code(&dsqn(&["train", "--config", "/nonexistent/catch.toml", "--out", "/tmp/x"])), 2);
    assert_eq!(code(&dsqn(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[hyper]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(code(&dsqn(&["train", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])), 2);
}

#[test]
fn train_eval_attack_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = dsqn(&["train", "--config", &config, "--seed", "1", "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let summary = json(&out);
        assert_eq!(summary["steps"], 600);
        out_dir
    };
    let a = run("a");
    let b = run("b");
    for f in ["metrics.csv", "metrics.jsonl", "final.ckpt", "step_00000300.ckpt", "config.toml"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let csv_a = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("final.ckpt")).unwrap(), std::fs::read(b.join("final.ckpt")).unwrap());
    let csv = String::from_utf8(csv_a).unwrap();
    assert!(csv.starts_with("step,episode,return,loss,epsilon,eval_mean\n"));
    let evals: Vec<&str> = csv.lines().filter(|l| !l.ends_with(',')).skip(1).collect();
    assert_eq!(evals.len(), 3);
    assert!(evals[0].starts_with("200,"));

    // Resuming the mid-run checkpoint reproduces the final checkpoint.
    let resumed = dir.path().join("resumed");
    let out = dsqn(&[
        "train",
        "--config",
        &config,
        "--resume",
        a.join("step_00000300.ckpt").to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(resumed.join("final.ckpt")).unwrap(), std::fs::read(a.join("final.ckpt")).unwrap());

    let ckpt = a.join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let eval = dsqn(&["eval", "--ckpt", ckpt, "--episodes", "10", "--seed", "3"]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let eval = json(&eval);
    assert_eq!(eval["returns"].as_array().unwrap().len(), 10);

    let clean = dsqn(&["eval", "--ckpt", ckpt, "--episodes", "10", "--seed", "3", "--epsilon", "0"]);
    let attack = dsqn(&[
        "attack",
        "--ckpt",
        ckpt,
        "--epsilon",
        "0",
        "--episodes",
        "10",
        "--seed",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&attack), 0, "{}", String::from_utf8_lossy(&attack.stderr));
    let report = json(&attack);
    assert_eq!(report["before"], report["after"]);
    assert_eq!(report["flip_fraction"], 0.0);
    assert!(dir.path().join("attack_report.json").exists());
    let before = report["before"].as_f64().unwrap();
    match report["decay_rate"].as_f64() {
        Some(d) => assert!((d - 100.0 * (before - report["after"].as_f64().unwrap()) / before).abs() < 1e-9),
        None => assert!(before <= 0.0),
    }
    assert_eq!(json(&clean)["mean"], report["before"]);

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOTACKPT0000").unwrap();
    let out = dsqn(&["attack", "--ckpt", bad.to_str().unwrap(), "--epsilon", "0.01"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}
