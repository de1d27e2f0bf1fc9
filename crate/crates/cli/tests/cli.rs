use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[world]
obstacles = []

[world.goal]
x_range = [-0.5, 0.5]
y = 0.0
z = 0.8
rpy = [0.0, 0.0, 1.5707963267948966]

[rewards]
max_steps = 2

[solver]
dt = 0.05
max_iterations = 2

[dqn]
hidden = [16]
normalizer_warmup = 10

[eval]
runs = 1
"#;

fn mmnmpc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmnmpc"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn dump_action_table_lists_every_action() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmnmpc(&["dump-action-table"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("action_table.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "index,model,target_type,target");
    assert_eq!(text.lines().count(), 28);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[rewards]\nw_gaol = 1.0\n").unwrap();
    let out = mmnmpc(&["--config", path.to_str().unwrap(), "dump-action-table"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("w_gaol"));
}

#[test]
fn eval_requires_a_policy() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmnmpc(&["eval"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--policy"));
}

#[test]
fn rollout_writes_trajectories_and_map() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = mmnmpc(
        &["--config", &cfg, "--episodes", "2", "--seed", "3", "rollout"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        header(&dir.path().join("trajectories.csv")),
        "episode,step,t,x_b,y_b,model_index,target_type,outcome"
    );
    assert!(fs::read_to_string(dir.path().join("map.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = mmnmpc(&["--config", &cfg, "--episodes", "3", "train"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(dir.path().join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(dir.path().join("config.toml").exists());

    let policy = dir.path().join("policy.json");
    let out = mmnmpc(
        &[
            "--config",
            &cfg,
            "--policy",
            policy.to_str().unwrap(),
            "--timing-mode",
            "sync",
            "eval",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        header(&dir.path().join("metrics.csv")),
        "method,success_pct,rollover_pct,collision_pct,boundary_pct,maxstep_pct,calls_base,mean_dtp_base_ms,std_dtp_base_ms,calls_arm,mean_dtp_arm_ms,std_dtp_arm_ms,calls_wb,mean_dtp_wb_ms,std_dtp_wb_ms"
    );
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("dqn,"));
}

#[test]
fn eval_rejects_a_policy_for_another_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = mmnmpc(&["--config", &cfg, "--episodes", "1", "train"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let policy = dir.path().join("policy.json");
    let out = mmnmpc(&["--policy", policy.to_str().unwrap(), "eval"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("inputs"));
}
