//! Experiment configuration: one TOML file drives every subcommand, and
//! every random choice in an experiment traces back to the seeds below, so
//! a config file reproduces its outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentConfig, Algorithm};
use crate::attacks::AttackMethod;
use crate::envs::EnvKind;
use crate::approximator::Seq2SeqConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_episodes() -> usize {
    40
}
fn default_epochs() -> usize {
    60
}
fn default_runs() -> usize {
    20
}
fn default_trials() -> usize {
    200
}
fn default_n_max() -> usize {
    50
}
fn default_max_delay() -> usize {
    5
}
fn default_output_len() -> usize {
    1
}
fn default_timebomb_eps() -> f64 {
    0.7
}
fn default_methods() -> Vec<AttackMethod> {
    vec![AttackMethod::Gaussian, AttackMethod::Fgsm, AttackMethod::Pgd]
}
fn default_transfer_states() -> usize {
    500
}
fn default_timebomb_method() -> AttackMethod {
    AttackMethod::Pgd
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSection {
    pub id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentSection {
    pub algorithm: String,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub train_steps: Option<u64>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub frame_stack: Option<usize>,
    #[serde(default)]
    pub competence_bar: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectSection {
    #[serde(default = "default_episodes")]
    pub episodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApproximatorSection {
    #[serde(default = "default_output_len")]
    pub output_len: usize,
    /// Absent: run the input-length search.
    #[serde(default)]
    pub input_len: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<AttackMethod>,
    #[serde(default)]
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_transfer_states")]
    pub transfer_states: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimebombSection {
    #[serde(default = "default_timebomb_eps")]
    pub epsilon: f64,
    #[serde(default = "default_timebomb_method")]
    pub method: AttackMethod,
    #[serde(default = "default_max_delay")]
    pub max_delay: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub env: EnvSection,
    pub agent: AgentSection,
    #[serde(default = "CollectSection::default_section")]
    pub collect: CollectSection,
    #[serde(default = "ApproximatorSection::default_section")]
    pub approximator: ApproximatorSection,
    #[serde(default = "AttackSection::default_section")]
    pub attack: AttackSection,
    #[serde(default = "TimebombSection::default_section")]
    pub timebomb: TimebombSection,
}

impl CollectSection {
    fn default_section() -> Self {
        CollectSection { episodes: default_episodes() }
    }
}
impl ApproximatorSection {
    fn default_section() -> Self {
        ApproximatorSection {
            output_len: default_output_len(),
            input_len: None,
            epochs: default_epochs(),
            n_max: default_n_max(),
        }
    }
}
impl AttackSection {
    fn default_section() -> Self {
        AttackSection {
            methods: default_methods(),
            eps_grid: Vec::new(),
            runs: default_runs(),
            transfer_states: default_transfer_states(),
        }
    }
}
impl TimebombSection {
    fn default_section() -> Self {
        TimebombSection {
            epsilon: default_timebomb_eps(),
            method: default_timebomb_method(),
            max_delay: default_max_delay(),
            trials: default_trials(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let config: ExperimentConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env_kind()?;
        self.algorithm()?;
        if let Some(g) = self.agent.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(ConfigError::Invalid(format!("gamma {g} outside (0, 1)")));
            }
        }
        if self.collect.episodes == 0 {
            return Err(ConfigError::Invalid("collect.episodes must be >= 1".into()));
        }
        if self.approximator.output_len == 0 {
            return Err(ConfigError::Invalid("approximator.output_len must be >= 1".into()));
        }
        if let Some(n) = self.approximator.input_len {
            if n == 0 {
                return Err(ConfigError::Invalid("approximator.input_len must be >= 1".into()));
            }
        }
        for &e in &self.attack.eps_grid {
            if e < 0.0 || !e.is_finite() {
                return Err(ConfigError::Invalid(format!("epsilon {e} must be >= 0")));
            }
        }
        if self.attack.runs == 0 {
            return Err(ConfigError::Invalid("attack.runs must be >= 1".into()));
        }
        if self.timebomb.epsilon < 0.0 {
            return Err(ConfigError::Invalid("timebomb.epsilon must be >= 0".into()));
        }
        if self.timebomb.max_delay == 0 || self.timebomb.max_delay >= self.approximator.output_len.max(2) {
            // max_delay must leave room inside the output sequence.
            if self.approximator.output_len > 1 {
                return Err(ConfigError::Invalid(format!(
                    "timebomb.max_delay {} must be in 1..{}",
                    self.timebomb.max_delay, self.approximator.output_len
                )));
            }
        }
        Ok(())
    }

    pub fn env_kind(&self) -> Result<EnvKind, ConfigError> {
        EnvKind::parse(&self.env.id)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown env id '{}'", self.env.id)))
    }

    pub fn algorithm(&self) -> Result<Algorithm, ConfigError> {
        Algorithm::parse(&self.agent.algorithm)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown algorithm '{}'", self.agent.algorithm)))
    }

    /// Agent config: preset for (env, algorithm) with explicit overrides.
    pub fn agent_config(&self) -> Result<AgentConfig, ConfigError> {
        let mut cfg = AgentConfig::preset(self.env_kind()?, self.algorithm()?);
        if let Some(g) = self.agent.gamma {
            cfg.gamma = g;
        }
        if let Some(s) = self.agent.train_steps {
            cfg.train_steps = s;
        }
        if let Some(lr) = self.agent.learning_rate {
            cfg.learning_rate = lr;
        }
        if let Some(k) = self.agent.frame_stack {
            cfg.frame_stack = k;
        }
        if let Some(b) = self.agent.competence_bar {
            cfg.competence_bar = b;
        }
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    /// Seq2seq preset for the env with the configured m (and n if pinned).
    pub fn seq2seq_config(&self) -> Result<Seq2SeqConfig, ConfigError> {
        let mut cfg = Seq2SeqConfig::preset(self.env_kind()?, self.approximator.output_len);
        if let Some(n) = self.approximator.input_len {
            cfg.input_len = n;
        }
        Ok(cfg)
    }

    /// Default epsilon grid per environment when the config names none.
    pub fn eps_grid(&self) -> Result<Vec<f64>, ConfigError> {
        if !self.attack.eps_grid.is_empty() {
            return Ok(self.attack.eps_grid.clone());
        }
        Ok(match self.env_kind()? {
            EnvKind::CartPole => vec![0.01, 0.05, 0.1, 0.2, 0.3],
            EnvKind::MiniPong => vec![0.01, 0.1, 0.3, 0.5, 0.7],
        })
    }

    // Well-known artifact paths inside output_dir.

    pub fn agent_path(&self) -> PathBuf {
        self.experiment.output_dir.join(format!("agent-{}-{}.rlab", self.env.id, self.agent.algorithm))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.experiment.output_dir.join(format!("dataset-{}-{}.rlab", self.env.id, self.agent.algorithm))
    }

    pub fn model_path(&self) -> PathBuf {
        self.experiment.output_dir.join(format!(
            "seq2seq-{}-{}-m{}.rlab",
            self.env.id, self.agent.algorithm, self.approximator.output_len
        ))
    }

    pub fn csv_path(&self, stem: &str) -> PathBuf {
        self.experiment.output_dir.join(format!("{stem}.csv"))
    }
}
