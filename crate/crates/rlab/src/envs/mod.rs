//! Deterministic, snapshottable toy environments.
//!
//! Two games: CartPole (4-signal vector observation, canonical physics) and
//! MiniPong (16x16 single-channel image observation, a paddle-and-ball game
//! small enough to train against in minutes). Both are fully determined by
//! their reset seed and action sequence, and both can be snapshotted and
//! restored bit-exactly — the time-bomb protocol depends on replaying the
//! same state twice.

mod cartpole;
mod minipong;

pub use cartpole::{CartPole, CartPoleState};
pub use minipong::{MiniPong, MiniPongState, MINIPONG_GRID};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a terminal episode; reset first")]
    SteppedAfterDone,
    #[error("action {action} out of range (action count {count})")]
    ActionOutOfRange { action: usize, count: usize },
    #[error("snapshot is from a different environment type")]
    SnapshotKindMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvKind {
    CartPole,
    MiniPong,
}

impl EnvKind {
    pub fn id(&self) -> &'static str {
        match self {
            EnvKind::CartPole => "cartpole",
            EnvKind::MiniPong => "minipong",
        }
    }

    pub fn parse(s: &str) -> Option<EnvKind> {
        match s {
            "cartpole" => Some(EnvKind::CartPole),
            "minipong" => Some(EnvKind::MiniPong),
            _ => None,
        }
    }

    pub fn build(&self) -> Box<dyn Environment> {
        match self {
            EnvKind::CartPole => Box::new(CartPole::new()),
            EnvKind::MiniPong => Box::new(MiniPong::new()),
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            EnvKind::CartPole => 2,
            EnvKind::MiniPong => 3,
        }
    }

    pub fn obs_shape(&self) -> Vec<usize> {
        match self {
            EnvKind::CartPole => vec![4],
            EnvKind::MiniPong => vec![1, MINIPONG_GRID, MINIPONG_GRID],
        }
    }

    /// Valid range of clean observation values; perturbed observations are
    /// clamped back into this range before delivery.
    pub fn obs_bounds(&self) -> (f64, f64) {
        match self {
            EnvKind::CartPole => (-1.0, 1.0),
            EnvKind::MiniPong => (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Tensor,
    pub reward: f64,
    pub done: bool,
}

/// Opaque saved state; restoring into the wrong environment type fails.
#[derive(Debug, Clone)]
pub enum Snapshot {
    CartPole(CartPoleState),
    MiniPong(MiniPongState),
}

pub trait Environment: Send {
    fn kind(&self) -> EnvKind;

    /// Seed-determined initial state; identical seeds give bit-identical
    /// initial observations.
    fn reset(&mut self, seed: u64) -> Tensor;

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError>;

    fn snapshot(&self) -> Snapshot;

    fn restore(&mut self, snapshot: &Snapshot) -> Result<(), EnvError>;

    fn action_count(&self) -> usize {
        self.kind().action_count()
    }

    fn obs_shape(&self) -> Vec<usize> {
        self.kind().obs_shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic_per_seed() {
        for kind in [EnvKind::CartPole, EnvKind::MiniPong] {
            let mut a = kind.build();
            let mut b = kind.build();
            assert_eq!(a.reset(0), b.reset(0));
            assert_ne!(a.reset(1), a.reset(2));
        }
    }

    #[test]
    fn snapshot_replay_reproduces_rewards() {
        for kind in [EnvKind::CartPole, EnvKind::MiniPong] {
            let mut env = kind.build();
            env.reset(42);
            for i in 0..5 {
                env.step(i % kind.action_count()).unwrap();
            }
            let snap = env.snapshot();
            let actions: Vec<usize> = (0..10).map(|i| (i * 7 + 3) % kind.action_count()).collect();
            let first: Vec<(f64, bool)> = actions
                .iter()
                .map(|&a| {
                    let r = env.step(a).unwrap();
                    (r.reward, r.done)
                })
                .collect();
            env.restore(&snap).unwrap();
            let second: Vec<(f64, bool)> = actions
                .iter()
                .map(|&a| {
                    let r = env.step(a).unwrap();
                    (r.reward, r.done)
                })
                .collect();
            assert_eq!(first, second);
        }
    }

    #[test]
    fn restore_rejects_wrong_kind() {
        let mut cp = EnvKind::CartPole.build();
        let mut mp = EnvKind::MiniPong.build();
        cp.reset(0);
        mp.reset(0);
        let snap = mp.snapshot();
        assert!(matches!(cp.restore(&snap), Err(EnvError::SnapshotKindMismatch)));
    }

    #[test]
    fn restored_terminal_state_stays_terminal() {
        let mut env = EnvKind::CartPole.build();
        env.reset(0);
        loop {
            if env.step(0).unwrap().done {
                break;
            }
        }
        let snap = env.snapshot();
        let mut other = EnvKind::CartPole.build();
        other.reset(99);
        other.restore(&snap).unwrap();
        assert!(matches!(other.step(0), Err(EnvError::SteppedAfterDone)));
    }

    #[test]
    fn instances_do_not_alias() {
        let mut a = EnvKind::MiniPong.build();
        let mut b = EnvKind::MiniPong.build();
        a.reset(5);
        b.reset(5);
        let snap = a.snapshot();
        b.restore(&snap).unwrap();
        // Diverging action sequences must produce diverging states.
        for _ in 0..12 {
            a.step(0).unwrap();
            b.step(2).unwrap();
        }
        let oa = a.step(1).unwrap().observation;
        let ob = b.step(1).unwrap().observation;
        assert_ne!(oa, ob);
    }
}
