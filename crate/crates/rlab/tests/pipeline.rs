//! End-to-end CLI pipeline on a miniature configuration: train, collect,
//! approximate, attack, and re-run for byte-identical outputs.

use std::fs;
use std::path::Path;

use rlab::cli;

fn run(args: &[&str]) -> i32 {
    cli::run(args.iter().map(|s| s.to_string()))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("out");
    let config = format!(
        r#"
[experiment]
seed = 11
output_dir = "{}"

[env]
id = "cartpole"

[agent]
algorithm = "dqn"
train_steps = 12000

[collect]
episodes = 12

[approximator]
output_len = 3
input_len = 4
epochs = 2

[attack]
methods = ["gaussian", "fgsm", "pgd"]
eps_grid = [0.05, 0.2]
runs = 2
transfer_states = 40

[timebomb]
epsilon = 0.4
method = "pgd"
max_delay = 2
trials = 5
"#,
        out.display()
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, config).unwrap();
    path
}

#[test]
fn cli_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let c = config.to_str().unwrap();
    let out = dir.path().join("out");

    assert_eq!(run(&["rlab", "train-agent", "-c", c]), 0);
    assert!(out.join("agent-cartpole-dqn.rlab").exists());
    assert!(out.join("training-curve-cartpole-dqn.csv").exists());

    assert_eq!(run(&["rlab", "eval", "-c", c]), 0);

    assert_eq!(run(&["rlab", "collect", "-c", c]), 0);
    assert!(out.join("dataset-cartpole-dqn.rlab").exists());

    assert_eq!(run(&["rlab", "approximate", "-c", c]), 0);
    assert!(out.join("seq2seq-cartpole-dqn-m3.rlab").exists());
    assert!(out.join("accuracy-cartpole-dqn-m3.csv").exists());

    assert_eq!(run(&["rlab", "attack-reward", "-c", c]), 0);
    let reward_csv = out.join("reward-attack-cartpole-dqn.csv");
    assert!(reward_csv.exists());
    // 3 methods x 2 epsilons + clean baseline + header.
    assert_eq!(fs::read_to_string(&reward_csv).unwrap().lines().count(), 8);

    assert_eq!(run(&["rlab", "attack-transfer", "-c", c]), 0);
    assert!(out.join("transfer-cartpole-dqn.csv").exists());

    assert_eq!(run(&["rlab", "attack-timebomb", "-c", c]), 0);
    let tb = out.join("timebomb-cartpole-dqn.csv");
    assert_eq!(fs::read_to_string(&tb).unwrap().lines().count(), 3);

    // Outputs are write-once without force.
    assert_eq!(run(&["rlab", "attack-reward", "-c", c]), 2);

    // Identical config re-runs byte-identically.
    let first = fs::read(&reward_csv).unwrap();
    assert_eq!(run(&["rlab", "attack-reward", "-c", c, "--force"]), 0);
    assert_eq!(fs::read(&reward_csv).unwrap(), first);
}

#[test]
fn cli_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown subcommand.
    assert_eq!(run(&["rlab", "frobnicate"]), 1);

    // Config with gamma out of range is rejected before any computation.
    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        r#"
[experiment]
seed = 1
output_dir = "x"

[env]
id = "cartpole"

[agent]
algorithm = "dqn"
train_steps = 12000
gamma = 1.5
"#,
    )
    .unwrap();
    assert_eq!(run(&["rlab", "train-agent", "-c", bad.to_str().unwrap()]), 1);

    // Missing config file.
    assert_eq!(run(&["rlab", "eval", "-c", "/nonexistent/x.toml"]), 1);

    // Missing agent archive surfaces as a runtime failure.
    let cfg = write_config(dir.path());
    assert_eq!(run(&["rlab", "eval", "-c", cfg.to_str().unwrap()]), 2);
}
