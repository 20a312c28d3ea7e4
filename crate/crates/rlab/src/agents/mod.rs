//! Target RL agents: DQN, Double-DQN and A2C, trained on the toy
//! environments and frozen into greedy evaluation-mode policies.
//!
//! Everything downstream of training sees an agent only through the
//! [`Policy`] trait — one `act` call mapping a window of delivered
//! observations to an action index. That trait is the entire black-box
//! surface the attack harness is allowed to touch.

mod a2c;
mod dqn;
mod net;
mod replay;

pub use replay::Replay;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::envs::{EnvError, EnvKind};
use crate::tensor::{Graph, ParameterStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("training budget exhausted below the competence bar: best eval {best:.2} < {bar:.2} after {steps} steps")]
    CompetenceBar { bar: f64, best: f64, steps: u64 },
    #[error("act called with window length {got}, frame stack is {expected}")]
    WrongWindow { expected: usize, got: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Dqn,
    A2c,
    DoubleDqn,
}

impl Algorithm {
    pub fn id(&self) -> &'static str {
        match self {
            Algorithm::Dqn => "dqn",
            Algorithm::A2c => "a2c",
            Algorithm::DoubleDqn => "double-dqn",
        }
    }

    pub fn parse(s: &str) -> Option<Algorithm> {
        match s {
            "dqn" => Some(Algorithm::Dqn),
            "a2c" => Some(Algorithm::A2c),
            "double-dqn" | "ddqn" => Some(Algorithm::DoubleDqn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DqnHyper {
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the step budget over which epsilon decays linearly.
    pub eps_decay_fraction: f64,
    pub learn_start: usize,
    pub train_every: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct A2cHyper {
    pub rollout_len: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub n_envs: usize,
    pub grad_clip: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub frame_stack: usize,
    /// Environment-step budget for training.
    pub train_steps: u64,
    pub learning_rate: f64,
    pub dqn: DqnHyper,
    pub a2c: A2cHyper,
    pub eval_episodes: usize,
    pub eval_every: u64,
    pub competence_bar: f64,
}

impl AgentConfig {
    /// Canonical hyperparameters per environment and algorithm.
    pub fn preset(kind: EnvKind, algorithm: Algorithm) -> AgentConfig {
        let (frame_stack, competence_bar) = match kind {
            EnvKind::CartPole => (1, 475.0),
            EnvKind::MiniPong => (2, 20.0),
        };
        let train_steps = match (kind, algorithm) {
            (EnvKind::CartPole, Algorithm::A2c) => 600_000,
            (EnvKind::CartPole, _) => 120_000,
            (EnvKind::MiniPong, Algorithm::A2c) => 900_000,
            (EnvKind::MiniPong, _) => 400_000,
        };
        AgentConfig {
            algorithm,
            gamma: 0.99,
            frame_stack,
            train_steps,
            learning_rate: 1e-3,
            dqn: DqnHyper {
                replay_capacity: 50_000,
                batch_size: 64,
                target_sync: 500,
                eps_start: 1.0,
                eps_end: 0.05,
                eps_decay_fraction: 0.5,
                learn_start: 1_000,
                train_every: if kind == EnvKind::MiniPong { 4 } else { 1 },
            },
            a2c: A2cHyper { rollout_len: 5, value_coef: 0.5, entropy_coef: 0.01, n_envs: 8, grad_clip: 0.5 },
            eval_episodes: 20,
            eval_every: match kind {
                EnvKind::CartPole => 2_000,
                EnvKind::MiniPong => 10_000,
            },
            competence_bar,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(AgentError::InvalidConfig(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if self.frame_stack == 0 {
            return Err(AgentError::InvalidConfig("frame_stack must be >= 1".into()));
        }
        if self.train_steps == 0 {
            return Err(AgentError::InvalidConfig("training budget is zero".into()));
        }
        if self.dqn.replay_capacity == 0 || self.dqn.batch_size == 0 {
            return Err(AgentError::InvalidConfig("replay capacity and batch size must be positive".into()));
        }
        if self.a2c.rollout_len == 0 || self.a2c.n_envs == 0 {
            return Err(AgentError::InvalidConfig("a2c rollout length and env count must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(AgentError::InvalidConfig("eval_episodes must be >= 1".into()));
        }
        Ok(())
    }
}

/// The whole black-box surface of a frozen agent: one deterministic action
/// per window of the last `frame_stack` delivered observations.
pub trait Policy: Send + Sync {
    fn act(&self, window: &[Tensor]) -> Result<usize, AgentError>;
    fn frame_stack(&self) -> usize;
    fn action_count(&self) -> usize;
}

/// Frozen greedy agent: policy network parameters plus its config.
/// Evaluation mode is unconditional — there is no exploration path here.
pub struct TrainedAgent {
    env: EnvKind,
    config: AgentConfig,
    policy_graph: Graph,
    store: ParameterStore,
    training_curve: Vec<(u64, f64)>,
}

impl TrainedAgent {
    pub(crate) fn new(
        env: EnvKind,
        config: AgentConfig,
        policy_graph: Graph,
        store: ParameterStore,
        training_curve: Vec<(u64, f64)>,
    ) -> Self {
        TrainedAgent { env, config, policy_graph, store, training_curve }
    }

    pub fn env(&self) -> EnvKind {
        self.env
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    /// Mean eval score logged at each evaluation checkpoint during training.
    pub fn training_curve(&self) -> &[(u64, f64)] {
        &self.training_curve
    }

    /// Rebuilds an agent from archived parameters.
    pub fn from_parts(
        env: EnvKind,
        config: AgentConfig,
        params: Vec<(String, Tensor)>,
        training_curve: Vec<(u64, f64)>,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        let (graph, mut store) = net::policy_graph_for(env, &config, 0)?;
        for (name, value) in params {
            store.set_value(&name, value)?;
        }
        Ok(TrainedAgent { env, config, policy_graph: graph, store, training_curve })
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}

impl Policy for TrainedAgent {
    fn act(&self, window: &[Tensor]) -> Result<usize, AgentError> {
        if window.len() != self.config.frame_stack {
            return Err(AgentError::WrongWindow { expected: self.config.frame_stack, got: window.len() });
        }
        let input = stack_frames(window, &self.env.obs_shape(), self.config.frame_stack)?;
        let out = self.policy_graph.output_id("out")?;
        let run = self.policy_graph.forward_to(&self.store, &[("obs", &input)], &[out])?;
        Ok(crate::tensor::argmax_slice(run.value(out)?.data()))
    }

    fn frame_stack(&self) -> usize {
        self.config.frame_stack
    }

    fn action_count(&self) -> usize {
        self.env.action_count()
    }
}

/// Stacks `k` frames (oldest first) into one network input of batch 1.
/// Vector frames concatenate; image frames stack along the channel axis.
pub(crate) fn stack_frames(window: &[Tensor], frame_shape: &[usize], k: usize) -> Result<Tensor, TensorError> {
    assert_eq!(window.len(), k);
    let mut data = Vec::with_capacity(window.iter().map(Tensor::numel).sum());
    for f in window {
        if f.shape() != frame_shape {
            return Err(TensorError::Shape {
                context: "stack_frames".into(),
                detail: format!("frame {:?} vs {:?}", f.shape(), frame_shape),
            });
        }
        data.extend_from_slice(f.data());
    }
    let mut shape = stacked_shape(frame_shape, k);
    shape.insert(0, 1);
    Tensor::new(shape, data)
}

/// Per-sample input shape after stacking `k` frames of `frame_shape`.
pub(crate) fn stacked_shape(frame_shape: &[usize], k: usize) -> Vec<usize> {
    match frame_shape {
        [n] => vec![n * k],
        [c, h, w] => vec![c * k, *h, *w],
        other => panic!("unsupported frame shape {other:?}"),
    }
}

/// Sliding window of the last `k` observations as delivered to the agent,
/// padded at episode start by repeating the first frame.
#[derive(Debug, Clone)]
pub struct FrameWindow {
    k: usize,
    frames: Vec<Tensor>,
}

impl FrameWindow {
    pub fn new(k: usize, first: Tensor) -> Self {
        FrameWindow { k, frames: vec![first; k] }
    }

    pub fn push(&mut self, obs: Tensor) {
        self.frames.remove(0);
        self.frames.push(obs);
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn latest(&self) -> &Tensor {
        self.frames.last().expect("non-empty")
    }

    /// Replaces the newest frame (used when an attack perturbs the
    /// observation after it was already pushed).
    pub fn replace_latest(&mut self, obs: Tensor) {
        *self.frames.last_mut().expect("non-empty") = obs;
    }

    pub fn depth(&self) -> usize {
        self.k
    }
}

/// Mean/std/per-episode scores of clean greedy evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStats {
    pub mean: f64,
    pub std: f64,
    pub per_episode: Vec<f64>,
}

impl ScoreStats {
    pub fn from_scores(per_episode: Vec<f64>) -> ScoreStats {
        let n = per_episode.len() as f64;
        let mean = per_episode.iter().sum::<f64>() / n;
        let var = per_episode.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        ScoreStats { mean, std: var.sqrt(), per_episode }
    }
}

/// Runs clean greedy episodes with the given seeds and aggregates the
/// per-episode total rewards.
pub fn evaluate_agent(policy: &dyn Policy, env: EnvKind, seeds: &[u64]) -> Result<ScoreStats, AgentError> {
    assert!(!seeds.is_empty(), "need at least one episode");
    let mut scores = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut e = env.build();
        let obs = e.reset(seed);
        let mut window = FrameWindow::new(policy.frame_stack(), obs);
        let mut total = 0.0;
        loop {
            let action = policy.act(window.frames())?;
            let step = e.step(action)?;
            total += step.reward;
            if step.done {
                break;
            }
            window.push(step.observation);
        }
        scores.push(total);
    }
    Ok(ScoreStats::from_scores(scores))
}

/// Deterministic eval seed list used by training checkpoints and the CLI.
pub fn eval_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count).map(|i| derive_seed(base, 0x5EED_0000 + i as u64)).collect()
}

/// Trains an agent to the per-environment competence bar. Fails loudly if
/// the budget runs out below the bar — a weak agent is never returned.
pub fn train_agent(config: &AgentConfig, env: EnvKind, seed: u64) -> Result<TrainedAgent, AgentError> {
    config.validate()?;
    match config.algorithm {
        Algorithm::Dqn => dqn::train(config, env, seed, false),
        Algorithm::DoubleDqn => dqn::train(config, env, seed, true),
        Algorithm::A2c => a2c::train(config, env, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FixedOutput(Vec<f64>);

    impl Policy for FixedOutput {
        fn act(&self, _window: &[Tensor]) -> Result<usize, AgentError> {
            Ok(crate::tensor::argmax_slice(&self.0))
        }
        fn frame_stack(&self) -> usize {
            1
        }
        fn action_count(&self) -> usize {
            self.0.len()
        }
    }

    #[test]
    fn argmax_and_tiebreak_examples() {
        let w = [Tensor::from_vec(vec![0.0])];
        assert_eq!(FixedOutput(vec![0.2, 0.9]).act(&w).unwrap(), 1);
        assert_eq!(FixedOutput(vec![0.5, 0.5]).act(&w).unwrap(), 0);
    }

    #[test]
    fn zero_budget_is_an_error() {
        let mut cfg = AgentConfig::preset(EnvKind::CartPole, Algorithm::Dqn);
        cfg.train_steps = 0;
        assert!(matches!(train_agent(&cfg, EnvKind::CartPole, 0), Err(AgentError::InvalidConfig(_))));
    }

    #[test]
    fn config_validation_rejects_bad_gamma() {
        let mut cfg = AgentConfig::preset(EnvKind::CartPole, Algorithm::Dqn);
        cfg.gamma = 1.5;
        assert!(cfg.validate().is_err());
        cfg.gamma = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_episode_std_is_zero() {
        let s = ScoreStats::from_scores(vec![13.0]);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.mean, 13.0);
    }

    #[test]
    fn frame_window_pads_then_slides() {
        let mut w = FrameWindow::new(2, Tensor::from_vec(vec![1.0]));
        assert_eq!(w.frames()[0], w.frames()[1]);
        w.push(Tensor::from_vec(vec![2.0]));
        assert_eq!(w.frames()[0].data(), &[1.0]);
        assert_eq!(w.frames()[1].data(), &[2.0]);
        w.push(Tensor::from_vec(vec![3.0]));
        assert_eq!(w.frames()[0].data(), &[2.0]);
        assert_eq!(w.latest().data(), &[3.0]);
    }

    #[test]
    fn stacking_concatenates_vectors_and_channels() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0, 4.0]);
        let s = stack_frames(&[a, b], &[2], 2).unwrap();
        assert_eq!(s.shape(), &[1, 4]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);

        let img = Tensor::zeros(&[1, 3, 3]);
        let s = stack_frames(&[img.clone(), img], &[1, 3, 3], 2).unwrap();
        assert_eq!(s.shape(), &[1, 2, 3, 3]);
    }
}
