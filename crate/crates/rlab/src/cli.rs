//! Command-line driver: every subcommand reads one experiment config,
//! writes archives and CSVs under the config's output directory, and exits
//! 0 on success, 1 on usage/config errors, 2 on runtime failures, 3 when a
//! trained agent misses its competence bar.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::agents::{evaluate_agent, eval_seeds, train_agent, AgentError};
use crate::approximator::{accuracy, build_model, select_input_length, train_seq2seq, TrainOptions};
use crate::archive::{load_agent, load_dataset, load_seq2seq, save_agent, save_dataset, save_seq2seq};
use crate::attacks::AttackSpec;
use crate::config::ExperimentConfig;
use crate::csvout::{
    accuracy_csv, length_search_csv, reward_attack_csv, timebomb_csv, training_curve_csv, transfer_csv,
    write_csv,
};
use crate::derive_seed;
use crate::harness::{collect_transfer_states, run_reward_attack, run_timebomb_curve, run_transferability};
use crate::trajectory::{collect_episodes, split_dataset, Role};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_COMPETENCE: i32 = 3;

#[derive(Parser)]
#[command(name = "rlab", version, about = "Black-box attack lab for toy RL agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured agent to its competence bar and archive it.
    TrainAgent(CommonArgs),
    /// Record clean episodes from the archived agent into a dataset.
    Collect(CommonArgs),
    /// Select the input length (unless pinned) and train the seq2seq model.
    Approximate(CommonArgs),
    /// Clean evaluation of the archived agent.
    Eval(CommonArgs),
    /// Reward-degradation sweep over the epsilon grid.
    AttackReward(CommonArgs),
    /// Transferability of crafted perturbations to the live agent.
    AttackTransfer(CommonArgs),
    /// Delayed-trigger attack success per delay.
    AttackTimebomb(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own usage/help; --help and --version are not
            // errors.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (Command::TrainAgent(a)
    | Command::Collect(a)
    | Command::Approximate(a)
    | Command::Eval(a)
    | Command::AttackReward(a)
    | Command::AttackTransfer(a)
    | Command::AttackTimebomb(a)) = &cli.command;

    let config = match ExperimentConfig::from_path(&a.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: config: {e}");
            return EXIT_USAGE;
        }
    };
    let force = a.force || config.experiment.force;

    let result = match &cli.command {
        Command::TrainAgent(_) => cmd_train_agent(&config, force),
        Command::Collect(_) => cmd_collect(&config, force),
        Command::Approximate(_) => cmd_approximate(&config, force),
        Command::Eval(_) => cmd_eval(&config),
        Command::AttackReward(_) => cmd_attack_reward(&config, force),
        Command::AttackTransfer(_) => cmd_attack_transfer(&config, force),
        Command::AttackTimebomb(_) => cmd_attack_timebomb(&config, force),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Competence(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Competence(_) => EXIT_COMPETENCE,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn cmd_train_agent(config: &ExperimentConfig, force: bool) -> Result<(), CliError> {
    let env = config.env_kind().map_err(usage)?;
    let agent_config = config.agent_config().map_err(usage)?;
    let seed = derive_seed(config.experiment.seed, 1);
    let agent = match train_agent(&agent_config, env, seed) {
        Ok(agent) => agent,
        Err(e @ AgentError::CompetenceBar { .. }) => return Err(CliError::Competence(e.to_string())),
        Err(e) => return Err(runtime(e)),
    };
    save_agent(&config.agent_path(), &agent, force).map_err(runtime)?;
    write_csv(
        &config.csv_path(&format!("training-curve-{}-{}", config.env.id, config.agent.algorithm)),
        &training_curve_csv(agent.training_curve()),
        force,
    )
    .map_err(runtime)?;
    let last = agent.training_curve().last().copied().unwrap_or((0, 0.0));
    println!("trained {} on {}: eval mean {:.2} at step {}", config.agent.algorithm, config.env.id, last.1, last.0);
    println!("agent archive: {}", config.agent_path().display());
    Ok(())
}

fn cmd_collect(config: &ExperimentConfig, force: bool) -> Result<(), CliError> {
    let env = config.env_kind().map_err(usage)?;
    let agent = load_agent(&config.agent_path()).map_err(runtime)?;
    let seed = derive_seed(config.experiment.seed, 2);
    let mut dataset =
        collect_episodes(&agent, env, config.collect.episodes, seed).map_err(runtime)?;
    split_dataset(&mut dataset, derive_seed(config.experiment.seed, 3)).map_err(runtime)?;
    save_dataset(&config.dataset_path(), &dataset, force).map_err(runtime)?;
    let steps: usize = dataset.episodes.iter().map(|e| e.len()).sum();
    let (train, eval) = dataset.role_counts();
    println!("collected {} episodes ({steps} steps), split {train}/{eval}", dataset.episodes.len());
    println!("dataset archive: {}", config.dataset_path().display());
    Ok(())
}

fn cmd_approximate(config: &ExperimentConfig, force: bool) -> Result<(), CliError> {
    let dataset = load_dataset(&config.dataset_path()).map_err(runtime)?;
    let mut model_config = config.seq2seq_config().map_err(usage)?;

    if config.approximator.input_len.is_none() {
        let search = select_input_length(
            &dataset,
            &model_config,
            config.approximator.n_max,
            config.approximator.epochs,
            derive_seed(config.experiment.seed, 6),
        )
        .map_err(runtime)?;
        write_csv(
            &config.csv_path(&format!("length-search-{}-{}", config.env.id, config.agent.algorithm)),
            &length_search_csv(&search),
            force,
        )
        .map_err(runtime)?;
        println!("input-length search chose n = {} ({} proxy epochs)", search.chosen, search.search_epochs);
        model_config.input_len = search.chosen;
    }

    let mut model = build_model(&model_config, derive_seed(config.experiment.seed, 4)).map_err(runtime)?;
    let opts = TrainOptions::new(config.approximator.epochs, derive_seed(config.experiment.seed, 5));
    train_seq2seq(&mut model, &dataset, &opts).map_err(runtime)?;
    let report = accuracy(&model, &dataset, Role::Eval).map_err(runtime)?;
    save_seq2seq(&config.model_path(), &model, force).map_err(runtime)?;
    write_csv(
        &config.csv_path(&format!(
            "accuracy-{}-{}-m{}",
            config.env.id, config.agent.algorithm, config.approximator.output_len
        )),
        &accuracy_csv(&report),
        force,
    )
    .map_err(runtime)?;
    println!(
        "approximator n = {}, m = {}: eval accuracy {:.4} over {} windows",
        model_config.input_len, model_config.output_len, report.mean, report.samples
    );
    println!("model archive: {}", config.model_path().display());
    Ok(())
}

fn cmd_eval(config: &ExperimentConfig) -> Result<(), CliError> {
    let env = config.env_kind().map_err(usage)?;
    let agent = load_agent(&config.agent_path()).map_err(runtime)?;
    let seeds = eval_seeds(derive_seed(config.experiment.seed, 1), agent.config().eval_episodes);
    let stats = evaluate_agent(&agent, env, &seeds).map_err(runtime)?;
    println!("clean eval over {} episodes: mean {:.2}, std {:.2}", seeds.len(), stats.mean, stats.std);
    Ok(())
}

fn cmd_attack_reward(config: &ExperimentConfig, force: bool) -> Result<(), CliError> {
    let env = config.env_kind().map_err(usage)?;
    let agent = load_agent(&config.agent_path()).map_err(runtime)?;
    let model = load_seq2seq(&config.model_path()).map_err(runtime)?;
    let grid = config.eps_grid().map_err(usage)?;
    let mut report = run_reward_attack(
        &agent,
        &model,
        env,
        &config.attack.methods,
        &grid,
        config.attack.runs,
        derive_seed(config.experiment.seed, 7),
    )
    .map_err(runtime)?;
    report.agent_algorithm = config.agent.algorithm.clone();
    write_csv(
        &config.csv_path(&format!("reward-attack-{}-{}", config.env.id, config.agent.algorithm)),
        &reward_attack_csv(&report),
        force,
    )
    .map_err(runtime)?;
    println!(
        "reward attack done: clean {:.2}, {} cells written",
        report.clean.mean_reward,
        report.rows.len()
    );
    Ok(())
}

fn cmd_attack_transfer(config: &ExperimentConfig, force: bool) -> Result<(), CliError> {
    let env = config.env_kind().map_err(usage)?;
    let agent = load_agent(&config.agent_path()).map_err(runtime)?;
    let model = load_seq2seq(&config.model_path()).map_err(runtime)?;
    let grid = config.eps_grid().map_err(usage)?;
    let states = collect_transfer_states(
        &agent,
        env,
        model.config().input_len,
        config.attack.transfer_states,
        derive_seed(config.experiment.seed, 8),
    )
    .map_err(runtime)?;
    let mut report = run_transferability(
        &agent,
        &model,
        env,
        &states,
        &config.attack.methods,
        &grid,
        derive_seed(config.experiment.seed, 9),
    )
    .map_err(runtime)?;
    report.agent_algorithm = config.agent.algorithm.clone();
    write_csv(
        &config.csv_path(&format!("transfer-{}-{}", config.env.id, config.agent.algorithm)),
        &transfer_csv(&report),
        force,
    )
    .map_err(runtime)?;
    println!("transferability over {} states written", states.len());
    Ok(())
}

fn cmd_attack_timebomb(config: &ExperimentConfig, force: bool) -> Result<(), CliError> {
    let env = config.env_kind().map_err(usage)?;
    let agent = load_agent(&config.agent_path()).map_err(runtime)?;
    let model = load_seq2seq(&config.model_path()).map_err(runtime)?;
    if model.config().output_len < 2 {
        return Err(usage("time-bomb needs a sequence model (approximator.output_len > 1)"));
    }
    let spec = AttackSpec::for_method(config.timebomb.method, config.timebomb.epsilon);
    let report = run_timebomb_curve(
        &agent,
        &model,
        env,
        &spec,
        config.timebomb.max_delay,
        config.timebomb.trials,
        derive_seed(config.experiment.seed, 10),
        &config.agent.algorithm,
        &config.agent.algorithm,
    )
    .map_err(runtime)?;
    write_csv(
        &config.csv_path(&format!("timebomb-{}-{}", config.env.id, config.agent.algorithm)),
        &timebomb_csv(&report),
        force,
    )
    .map_err(runtime)?;
    let mean: f64 = report.rows.iter().map(|r| r.rate).sum::<f64>() / report.rows.len() as f64;
    println!(
        "time-bomb (eps {}, delays 1..={}): mean success rate {:.3}",
        config.timebomb.epsilon, config.timebomb.max_delay, mean
    );
    Ok(())
}
