//! Experiment orchestration: reward-degradation sweeps, transferability
//! measurement, and the delayed-trigger time-bomb attack.
//!
//! Black-box discipline: every function here reaches the target agent only
//! through [`Policy::act`] and the episode rewards the environment emits.
//! The approximator (the attacker's own model) is fully accessible; the
//! agent is not — the trait bound is the compile-level check.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use thiserror::Error;

use crate::agents::{AgentError, FrameWindow, Policy};
use crate::approximator::{ApproximatorError, Seq2SeqModel};
use crate::attacks::{match_norms, perturb, AttackError, AttackMethod, AttackSpec, ObsBounds, Perturbation};
use crate::derive_seed;
use crate::envs::{EnvError, EnvKind};
use crate::tensor::Tensor;
use crate::trajectory::RolloutFifo;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("time-bomb delay {delay} must satisfy 1 <= delay < m = {m}")]
    BadDelay { delay: usize, m: usize },
    #[error("model input length n={model_n} does not match requested n={requested}")]
    FifoLength { model_n: usize, requested: usize },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Approximator(#[from] ApproximatorError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Discounted return: sum of gamma^i * r_i.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    assert!(gamma > 0.0 && gamma < 1.0, "gamma must be in (0, 1)");
    let mut total = 0.0;
    let mut w = 1.0;
    for &r in rewards {
        total += w * r;
        w *= gamma;
    }
    total
}

// ── reward-focused attack ───────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RewardRow {
    /// None marks the clean baseline row.
    pub method: Option<AttackMethod>,
    pub epsilon: f64,
    /// Mean realized l2 / l-inf over every fired perturbation in the cell.
    pub mean_l2: f64,
    pub mean_linf: f64,
    pub mean_reward: f64,
    pub std_reward: f64,
    /// Worst single episode in the cell; the FIFO-fill floor bounds it.
    pub min_reward: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardAttackReport {
    pub env: EnvKind,
    pub agent_algorithm: String,
    pub input_len: usize,
    pub output_len: usize,
    pub runs: usize,
    pub clean: RewardRow,
    pub rows: Vec<RewardRow>,
}

fn score_stats(scores: &[f64]) -> (f64, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Plays one episode delivering perturbed observations once the rollout
/// FIFO is full. Returns (total reward, fired perturbations).
#[allow(clippy::too_many_arguments)]
fn attacked_episode(
    policy: &dyn Policy,
    model: &Seq2SeqModel,
    env_kind: EnvKind,
    spec: Option<&AttackSpec>,
    episode_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Perturbation>), HarnessError> {
    let n = model.config().input_len;
    let bounds = ObsBounds::for_env(env_kind);
    let mut env = env_kind.build();
    let mut clean = env.reset(episode_seed);
    let mut window: Option<FrameWindow> = None;
    let mut fifo = RolloutFifo::new(n);
    let mut total = 0.0;
    let mut fired = Vec::new();

    loop {
        let delivered = match spec {
            Some(spec) if fifo.is_full() => {
                let (obs_window, action_window) = fifo.window().expect("full");
                let p = perturb(model, spec, &action_window, &obs_window, &clean, bounds, rng)?;
                let delivered = p.apply(&clean, bounds);
                fired.push(p);
                delivered
            }
            _ => clean.clone(),
        };
        match window.as_mut() {
            None => window = Some(FrameWindow::new(policy.frame_stack(), delivered.clone())),
            Some(w) => w.push(delivered.clone()),
        }
        let action = policy.act(window.as_ref().expect("set").frames())?;
        fifo.push(delivered, action);
        let sr = env.step(action)?;
        total += sr.reward;
        if sr.done {
            break;
        }
        clean = sr.observation;
    }
    Ok((total, fired))
}

/// Reward-degradation sweep: R episodes per (method, epsilon) cell plus a
/// clean baseline, all on the same episode seed list. The Gaussian rows
/// are norm-matched to the adversarial perturbations crafted at the same
/// epsilon.
pub fn run_reward_attack(
    policy: &dyn Policy,
    model: &Seq2SeqModel,
    env_kind: EnvKind,
    methods: &[AttackMethod],
    eps_grid: &[f64],
    runs: usize,
    seed: u64,
) -> Result<RewardAttackReport, HarnessError> {
    assert!(runs >= 1);
    let episode_seeds: Vec<u64> = (0..runs).map(|r| derive_seed(seed, 0xE50 + r as u64)).collect();

    let clean_scores: Vec<f64> = episode_seeds
        .iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            attacked_episode(policy, model, env_kind, None, s, &mut rng).map(|(t, _)| t)
        })
        .collect::<Result<_, _>>()?;
    let (mean, std) = score_stats(&clean_scores);
    let clean = RewardRow {
        method: None,
        epsilon: 0.0,
        mean_l2: 0.0,
        mean_linf: 0.0,
        mean_reward: mean,
        std_reward: std,
        min_reward: clean_scores.iter().copied().fold(f64::INFINITY, f64::min),
        episodes: runs,
    };

    let mut rows = Vec::new();
    for (ei, &eps) in eps_grid.iter().enumerate() {
        let mut adversarial: Vec<Perturbation> = Vec::new();
        let mut gaussian_requested = false;
        for &method in methods {
            if method == AttackMethod::Gaussian {
                gaussian_requested = true;
                continue;
            }
            let spec = AttackSpec::for_method(method, eps);
            let mut scores = Vec::with_capacity(runs);
            let mut perts = Vec::new();
            for (ri, &es) in episode_seeds.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (ei as u64) << 32 | ri as u64));
                let (score, fired) = attacked_episode(policy, model, env_kind, Some(&spec), es, &mut rng)?;
                scores.push(score);
                perts.extend(fired);
            }
            rows.push(summarize_row(method, eps, &scores, &perts));
            adversarial.extend(perts);
        }
        if gaussian_requested {
            let mut spec = AttackSpec::gaussian(eps);
            if !adversarial.is_empty() {
                spec = match_norms(&adversarial, &spec)?;
            }
            let mut scores = Vec::with_capacity(runs);
            let mut perts = Vec::new();
            for (ri, &es) in episode_seeds.iter().enumerate() {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA000_0000 | (ei as u64) << 16 | ri as u64));
                let (score, fired) = attacked_episode(policy, model, env_kind, Some(&spec), es, &mut rng)?;
                scores.push(score);
                perts.extend(fired);
            }
            rows.push(summarize_row(AttackMethod::Gaussian, eps, &scores, &perts));
        }
    }

    // Stable output order: method id, then epsilon.
    rows.sort_by(|a, b| {
        let ka = (a.method.map(|m| m.id()).unwrap_or(""), a.epsilon);
        let kb = (b.method.map(|m| m.id()).unwrap_or(""), b.epsilon);
        ka.partial_cmp(&kb).expect("finite")
    });

    Ok(RewardAttackReport {
        env: env_kind,
        agent_algorithm: String::new(),
        input_len: model.config().input_len,
        output_len: model.config().output_len,
        runs,
        clean,
        rows,
    })
}

fn summarize_row(method: AttackMethod, eps: f64, scores: &[f64], perts: &[Perturbation]) -> RewardRow {
    let (mean, std) = score_stats(scores);
    let count = perts.len().max(1) as f64;
    RewardRow {
        method: Some(method),
        epsilon: eps,
        mean_l2: perts.iter().map(|p| p.l2).sum::<f64>() / count,
        mean_linf: perts.iter().map(|p| p.linf).sum::<f64>() / count,
        mean_reward: mean,
        std_reward: std,
        min_reward: scores.iter().copied().fold(f64::INFINITY, f64::min),
        episodes: scores.len(),
    }
}

// ── transferability ─────────────────────────────────────────────────

/// A recorded attack context from a clean target-agent episode: the model
/// window, the agent's frame window, the clean current observation, and
/// the action the agent takes on it.
#[derive(Debug, Clone)]
pub struct TransferState {
    pub past_observations: Vec<Tensor>,
    pub past_actions: Vec<usize>,
    pub agent_frames: Vec<Tensor>,
    pub current: Tensor,
    pub clean_action: usize,
}

/// Rolls clean episodes and records up to `count` eligible states (those
/// with a full rollout FIFO), spread across episodes.
pub fn collect_transfer_states(
    policy: &dyn Policy,
    env_kind: EnvKind,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<TransferState>, HarnessError> {
    let mut states = Vec::with_capacity(count);
    let mut episode = 0u64;
    while states.len() < count {
        let mut env = env_kind.build();
        let mut clean = env.reset(derive_seed(seed, 0x7EA0 + episode));
        episode += 1;
        let mut window: Option<FrameWindow> = None;
        let mut fifo = RolloutFifo::new(n);
        loop {
            match window.as_mut() {
                None => window = Some(FrameWindow::new(policy.frame_stack(), clean.clone())),
                Some(w) => w.push(clean.clone()),
            }
            let frames = window.as_ref().expect("set").frames().to_vec();
            let action = policy.act(&frames)?;
            if fifo.is_full() && states.len() < count {
                let (obs, acts) = fifo.window().expect("full");
                states.push(TransferState {
                    past_observations: obs.into_iter().cloned().collect(),
                    past_actions: acts,
                    agent_frames: frames,
                    current: clean.clone(),
                    clean_action: action,
                });
            }
            fifo.push(clean.clone(), action);
            let sr = env.step(action)?;
            if sr.done || states.len() >= count {
                break;
            }
            clean = sr.observation;
        }
        assert!(episode < 10_000, "environment episodes too short to collect transfer states");
    }
    Ok(states)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub method: AttackMethod,
    pub epsilon: f64,
    pub flips: usize,
    pub total: usize,
    pub ratio: f64,
    pub mean_l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub env: EnvKind,
    pub agent_algorithm: String,
    pub states: usize,
    pub rows: Vec<TransferRow>,
}

/// For each recorded state and every (method, epsilon) cell, crafts a
/// perturbation on the approximator and tests whether the *agent's* action
/// changes. Gaussian cells are norm-matched to the adversarial batch at
/// the same epsilon.
pub fn run_transferability(
    policy: &dyn Policy,
    model: &Seq2SeqModel,
    env_kind: EnvKind,
    states: &[TransferState],
    methods: &[AttackMethod],
    eps_grid: &[f64],
    seed: u64,
) -> Result<TransferReport, HarnessError> {
    assert!(!states.is_empty());
    let bounds = ObsBounds::for_env(env_kind);
    let mut rows = Vec::new();

    for (ei, &eps) in eps_grid.iter().enumerate() {
        let mut adversarial: Vec<Perturbation> = Vec::new();
        let mut gaussian_requested = false;
        for &method in methods {
            if method == AttackMethod::Gaussian {
                gaussian_requested = true;
                continue;
            }
            let spec = AttackSpec::for_method(method, eps);
            let (row, perts) = transfer_cell(policy, model, states, &spec, bounds, seed, ei)?;
            rows.push(row);
            adversarial.extend(perts);
        }
        if gaussian_requested {
            let mut spec = AttackSpec::gaussian(eps);
            if !adversarial.is_empty() {
                spec = match_norms(&adversarial, &spec)?;
            }
            let (row, _) = transfer_cell(policy, model, states, &spec, bounds, seed, ei)?;
            rows.push(row);
        }
    }

    rows.sort_by(|a, b| {
        let ka = (a.method.id(), a.epsilon);
        let kb = (b.method.id(), b.epsilon);
        ka.partial_cmp(&kb).expect("finite")
    });
    Ok(TransferReport { env: env_kind, agent_algorithm: String::new(), states: states.len(), rows })
}

fn transfer_cell(
    policy: &dyn Policy,
    model: &Seq2SeqModel,
    states: &[TransferState],
    spec: &AttackSpec,
    bounds: ObsBounds,
    seed: u64,
    eps_index: usize,
) -> Result<(TransferRow, Vec<Perturbation>), HarnessError> {
    let mut flips = 0;
    let mut perts = Vec::with_capacity(states.len());
    for (si, st) in states.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            0x11_0000_0000 | (eps_index as u64) << 24 | si as u64,
        ));
        let obs_refs: Vec<&Tensor> = st.past_observations.iter().collect();
        let p = perturb(model, spec, &st.past_actions, &obs_refs, &st.current, bounds, &mut rng)?;
        let delivered = p.apply(&st.current, bounds);
        let mut frames = st.agent_frames.clone();
        *frames.last_mut().expect("non-empty") = delivered;
        if policy.act(&frames)? != st.clean_action {
            flips += 1;
        }
        perts.push(p);
    }
    let total = states.len();
    let mean_l2 = perts.iter().map(|p| p.l2).sum::<f64>() / total as f64;
    Ok((
        TransferRow {
            method: spec.method,
            epsilon: spec.epsilon,
            flips,
            total,
            ratio: flips as f64 / total as f64,
            mean_l2,
        },
        perts,
    ))
}

// ── time-bomb ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct DelayRow {
    pub delay: usize,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimebombReport {
    pub env: EnvKind,
    pub source_algorithm: String,
    pub target_algorithm: String,
    pub method: AttackMethod,
    pub epsilon: f64,
    pub rows: Vec<DelayRow>,
}

/// One time-bomb trial: play clean to a random attack point with a full
/// FIFO, snapshot, run the clean reference branch for `delay` steps,
/// restore, deliver a single perturbed observation targeted at output step
/// `delay`, continue clean, and compare the actions at t + delay.
#[allow(clippy::too_many_arguments)]
fn timebomb_trial(
    policy: &dyn Policy,
    model: &Seq2SeqModel,
    env_kind: EnvKind,
    spec: &AttackSpec,
    delay: usize,
    trial_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<bool, HarnessError> {
    let n = model.config().input_len;
    let bounds = ObsBounds::for_env(env_kind);

    // Pass 1: episode length under clean play.
    let mut env = env_kind.build();
    let mut obs = env.reset(trial_seed);
    let mut window = FrameWindow::new(policy.frame_stack(), obs.clone());
    let mut length = 0usize;
    loop {
        let action = policy.act(window.frames())?;
        let sr = env.step(action)?;
        length += 1;
        if sr.done {
            break;
        }
        window.push(sr.observation.clone());
    }
    if length <= n + delay {
        return Err(HarnessError::BadDelay { delay, m: model.config().output_len });
    }
    let attack_t = n + rng.gen_range(0..(length - delay - n));

    // Pass 2: replay clean to the attack point, maintaining the FIFO.
    let mut env = env_kind.build();
    obs = env.reset(trial_seed);
    let mut window: Option<FrameWindow> = None;
    let mut fifo = RolloutFifo::new(n);
    for _ in 0..attack_t {
        match window.as_mut() {
            None => window = Some(FrameWindow::new(policy.frame_stack(), obs.clone())),
            Some(w) => w.push(obs.clone()),
        }
        let action = policy.act(window.as_ref().expect("set").frames())?;
        fifo.push(obs.clone(), action);
        let sr = env.step(action)?;
        assert!(!sr.done, "clean replay diverged");
        obs = sr.observation;
    }
    let snapshot = env.snapshot();
    let window_before = window.expect("attack_t >= n >= 1");
    let (fifo_obs, fifo_actions) = fifo.window().expect("attack_t >= n");
    let current = obs;

    // Reference branch: clean delivery throughout.
    let reference = branch_action(policy, env_kind, &snapshot, &window_before, current.clone(), delay)?;

    // Attack branch: one perturbed delivery at the attack point, clean
    // observations afterwards.
    let p = perturb(model, spec, &fifo_actions, &fifo_obs, &current, bounds, rng)?;
    let delivered = p.apply(&current, bounds);
    let attacked = branch_action(policy, env_kind, &snapshot, &window_before, delivered, delay)?;

    Ok(attacked != reference)
}

/// From a snapshot and the agent's pre-attack frame window, delivers
/// `first` then plays clean for `delay` more steps; returns the action
/// taken at step `delay`.
fn branch_action(
    policy: &dyn Policy,
    env_kind: EnvKind,
    snapshot: &crate::envs::Snapshot,
    window_before: &FrameWindow,
    first: Tensor,
    delay: usize,
) -> Result<usize, HarnessError> {
    let mut env = env_kind.build();
    env.reset(0);
    env.restore(snapshot)?;
    let mut window = window_before.clone();
    window.push(first);
    let mut action = policy.act(window.frames())?;
    for _ in 0..delay {
        let sr = env.step(action)?;
        if sr.done {
            // Terminal before the delay elapses: compare the would-be
            // action on the final observation anyway.
            window.push(sr.observation);
            return Ok(policy.act(window.frames())?);
        }
        window.push(sr.observation);
        action = policy.act(window.frames())?;
    }
    Ok(action)
}

/// Success rate of the time-bomb at one delay over `trials` trials.
pub fn run_timebomb(
    policy: &dyn Policy,
    model: &Seq2SeqModel,
    env_kind: EnvKind,
    spec: &AttackSpec,
    delay: usize,
    trials: usize,
    seed: u64,
) -> Result<DelayRow, HarnessError> {
    let m = model.config().output_len;
    if delay == 0 || delay >= m {
        return Err(HarnessError::BadDelay { delay, m });
    }
    let spec = spec.clone().with_target_step(delay);
    spec.validate(m)?;
    let mut successes = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xB0B + (delay as u64) << 20 | trial as u64));
        let trial_seed = derive_seed(seed, 0x600D_0000 | (delay as u64) << 20 | trial as u64);
        if timebomb_trial(policy, model, env_kind, &spec, delay, trial_seed, &mut rng)? {
            successes += 1;
        }
    }
    Ok(DelayRow { delay, successes, trials, rate: successes as f64 / trials as f64 })
}

/// Full per-delay curve for delays 1..=max_delay.
#[allow(clippy::too_many_arguments)]
pub fn run_timebomb_curve(
    policy: &dyn Policy,
    model: &Seq2SeqModel,
    env_kind: EnvKind,
    spec: &AttackSpec,
    max_delay: usize,
    trials: usize,
    seed: u64,
    source_algorithm: &str,
    target_algorithm: &str,
) -> Result<TimebombReport, HarnessError> {
    let mut rows = Vec::new();
    for delay in 1..=max_delay {
        rows.push(run_timebomb(policy, model, env_kind, spec, delay, trials, seed)?);
    }
    Ok(TimebombReport {
        env: env_kind,
        source_algorithm: source_algorithm.to_string(),
        target_algorithm: target_algorithm.to_string(),
        method: spec.method,
        epsilon: spec.epsilon,
        rows,
    })
}
