use std::path::Path;
use std::process::{Command, Output};

fn topmoe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topmoe")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "env": "point_mass",
  "sac": {"n_experts": 2, "total_steps": 400, "warmup_steps": 200, "batch_size": 32, "checkpoint_every": 0},
  "out_dir": "res",
  "eval_episodes": 3
}"#;

fn single_run_dir(root: &Path) -> std::path::PathBuf {
    let mut dirs: Vec<_> = std::fs::read_dir(root.join("res")).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

#[test]
fn schema_is_printed() {
    let dir = tempfile::tempdir().unwrap();
    let o = topmoe(dir.path(), &["schema"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["required"][0], "env");
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&topmoe(dir.path(), &["train"])), 2);
    assert_eq!(code(&topmoe(dir.path(), &["frobnicate"])), 2);

    std::fs::write(dir.path().join("bad.json"), r#"{"env": "point_mass", "learning_rate": 1}"#).unwrap();
    let o = topmoe(dir.path(), &["train", "--config", "bad.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.json"), r#"{"env": "point_mass", "sac": {"batch_size": 0}}"#).unwrap();
    let o = topmoe(dir.path(), &["train", "--config", "bad.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    assert_eq!(code(&topmoe(dir.path(), &["distill"])), 2);
}

#[test]
fn train_distill_interpret_and_guards() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("cfg.json"), TINY).unwrap();
    let o = topmoe(root, &["train", "--config", "cfg.json", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = single_run_dir(root);
    assert!(run.join("eval.json").is_file());

    // existing run directory needs --force
    let o = topmoe(root, &["train", "--config", "cfg.json", "--seed", "5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    assert_eq!(code(&topmoe(root, &["train", "--config", "cfg.json", "--seed", "5", "--force"])), 0);

    let run_arg = run.to_str().unwrap();
    let o = topmoe(root, &["distill", "--run", run_arg, "--depth", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run.join("distill/tree_expert_1.txt").is_file());
    let o = topmoe(root, &["interpret", "--run", run_arg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(run.join("report/report.md")).unwrap();
    assert!(report.contains("## Expert 2"));

    let ck = run.join("checkpoints/final.json");
    let o = topmoe(root, &["evaluate", "--checkpoint", ck.to_str().unwrap(), "--episodes", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["returns"].as_array().unwrap().len(), 2);

    // a buffer from another run is refused
    let other = root.join("other.bin");
    let t = topmoe_core::Tensor::matrix(1, 6, vec![0.0; 6]).unwrap();
    topmoe::artifacts::write_replay_states(&other, "someone-else", &t).unwrap();
    let o = topmoe(root, &["distill", "--run", run_arg, "--buffer", other.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mismatch"), "{}", stderr(&o));
}

#[test]
fn baseline_prints_an_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let o = topmoe(dir.path(), &["baseline", "--env", "pendulum", "--episodes", "3", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["mean"].as_f64().unwrap() < 0.0);
    assert_eq!(v["lengths"][0], 200);
}

#[test]
fn sweep_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = format!(r#"{{"base": {TINY}, "lambdas": [0.0, 0.1], "seeds": [0, 1]}}"#);
    std::fs::write(dir.path().join("sweep.json"), sweep).unwrap();
    let o = topmoe(dir.path(), &["sweep", "--config", "sweep.json", "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join(String::from_utf8(o.stdout).unwrap().trim());
    let runs = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    assert!(runs.starts_with("env,n_experts,lambda,seed,avg_er,std_er,n_act,n_tot,run_id,status,error"));
    assert_eq!(std::fs::read_to_string(out.join("aggregate.csv")).unwrap().lines().count(), 3);
}
