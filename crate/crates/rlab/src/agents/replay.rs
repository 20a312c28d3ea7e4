//! Episode-aware replay buffer.
//!
//! Frames are stored once (as f32) and frame stacks are rebuilt at sample
//! time, so image environments stay within memory at full capacity. Stacks
//! shorter than `k` at an episode start are padded by repeating the first
//! frame, matching [`super::FrameWindow`].

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

struct Ep {
    frames: Vec<Box<[f32]>>,
    actions: Vec<u8>,
    rewards: Vec<f32>,
    terminated: bool,
}

impl Ep {
    fn transitions(&self) -> usize {
        self.actions.len()
    }
}

pub struct Replay {
    episodes: VecDeque<Ep>,
    capacity: usize,
    k: usize,
    frame_shape: Vec<usize>,
    total: usize,
}

pub struct Batch {
    /// `[B, stacked per-sample shape...]`
    pub states: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
}

impl Replay {
    pub fn new(capacity: usize, k: usize, frame_shape: &[usize]) -> Self {
        Replay { episodes: VecDeque::new(), capacity, k, frame_shape: frame_shape.to_vec(), total: 0 }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    fn to_f32(t: &Tensor) -> Box<[f32]> {
        t.data().iter().map(|&v| v as f32).collect()
    }

    pub fn begin_episode(&mut self, first_obs: &Tensor) {
        self.episodes.push_back(Ep {
            frames: vec![Self::to_f32(first_obs)],
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: false,
        });
    }

    pub fn push(&mut self, action: usize, reward: f64, next_obs: &Tensor, done: bool) {
        let ep = self.episodes.back_mut().expect("begin_episode first");
        ep.frames.push(Self::to_f32(next_obs));
        ep.actions.push(action as u8);
        ep.rewards.push(reward as f32);
        if done {
            ep.terminated = true;
        }
        self.total += 1;
        while self.total > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("non-empty");
            self.total -= old.transitions();
        }
    }

    /// Stacked frames ending at `t` (inclusive), padded at episode start.
    fn stack(&self, ep: &Ep, t: usize, out: &mut Vec<f64>) {
        for i in 0..self.k {
            let idx = (t + i + 1).saturating_sub(self.k);
            let frame = &ep.frames[idx.min(t)];
            out.extend(frame.iter().map(|&v| v as f64));
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, batch: usize) -> Batch {
        assert!(self.total > 0, "cannot sample an empty replay");
        let frame_len: usize = self.frame_shape.iter().product();
        let stacked_len = frame_len * self.k;
        let mut states = Vec::with_capacity(batch * stacked_len);
        let mut next_states = Vec::with_capacity(batch * stacked_len);
        let mut actions = Vec::with_capacity(batch);
        let mut rewards = Vec::with_capacity(batch);
        let mut dones = Vec::with_capacity(batch);

        for _ in 0..batch {
            let mut r = rng.gen_range(0..self.total);
            let mut chosen = None;
            for ep in &self.episodes {
                if r < ep.transitions() {
                    chosen = Some((ep, r));
                    break;
                }
                r -= ep.transitions();
            }
            let (ep, t) = chosen.expect("index within total");
            self.stack(ep, t, &mut states);
            self.stack(ep, t + 1, &mut next_states);
            actions.push(ep.actions[t] as usize);
            rewards.push(ep.rewards[t] as f64);
            dones.push(ep.terminated && t + 1 == ep.frames.len() - 1);
        }

        let mut shape = super::stacked_shape(&self.frame_shape, self.k);
        shape.insert(0, batch);
        Batch {
            states: Tensor::new(shape.clone(), states).expect("static shape"),
            next_states: Tensor::new(shape, next_states).expect("static shape"),
            actions,
            rewards,
            dones,
        }
    }
}
