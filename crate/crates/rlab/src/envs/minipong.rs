//! MiniPong: a 16x16 paddle-and-ball game with image observations.
//!
//! The ball moves one cell diagonally per tick, bouncing off the top,
//! bottom and left walls. The paddle (3 cells tall) guards the rightmost
//! column; intercepting the ball scores +1 and reflects it, letting it past
//! scores -1 and ends the episode. The observation is the full grid with
//! ball and paddle cells set to 1.0.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EnvError, EnvKind, Environment, Snapshot, StepResult};
use crate::tensor::Tensor;

pub const MINIPONG_GRID: usize = 16;
/// Rightmost column the ball occupies; the paddle sits one column further.
const BALL_MAX_X: i32 = MINIPONG_GRID as i32 - 2;
const PADDLE_COL: usize = MINIPONG_GRID - 1;
/// Paddle covers rows [y-1, y+1].
const PADDLE_HALF: i32 = 1;
pub const MINIPONG_EPISODE_CAP: u32 = 800;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniPongState {
    pub ball_x: i32,
    pub ball_y: i32,
    pub vel_x: i32,
    pub vel_y: i32,
    pub paddle_y: i32,
    pub rally: u32,
    pub steps: u32,
    pub done: bool,
}

pub struct MiniPong {
    state: MiniPongState,
}

impl MiniPong {
    pub fn new() -> Self {
        MiniPong {
            state: MiniPongState {
                ball_x: 4,
                ball_y: 8,
                vel_x: 1,
                vel_y: 1,
                paddle_y: 8,
                rally: 0,
                steps: 0,
                done: false,
            },
        }
    }

    pub fn raw_state(&self) -> &MiniPongState {
        &self.state
    }

    fn observation(&self) -> Tensor {
        let g = MINIPONG_GRID;
        let mut data = vec![0.0; g * g];
        let s = &self.state;
        data[s.ball_y as usize * g + s.ball_x as usize] = 1.0;
        for dy in -PADDLE_HALF..=PADDLE_HALF {
            let y = (s.paddle_y + dy) as usize;
            data[y * g + PADDLE_COL] = 1.0;
        }
        Tensor::new(vec![1, g, g], data).expect("static shape")
    }
}

impl Default for MiniPong {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for MiniPong {
    fn kind(&self) -> EnvKind {
        EnvKind::MiniPong
    }

    fn reset(&mut self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = MiniPongState {
            ball_x: rng.gen_range(2..=8),
            ball_y: rng.gen_range(2..=13),
            vel_x: if rng.gen_bool(0.5) { 1 } else { -1 },
            vel_y: if rng.gen_bool(0.5) { 1 } else { -1 },
            paddle_y: rng.gen_range(3..=12),
            rally: 0,
            steps: 0,
            done: false,
        };
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.state.done {
            return Err(EnvError::SteppedAfterDone);
        }
        if action >= 3 {
            return Err(EnvError::ActionOutOfRange { action, count: 3 });
        }
        let s = &mut self.state;
        // 0 = up, 1 = stay, 2 = down.
        let dy = match action {
            0 => -1,
            1 => 0,
            _ => 1,
        };
        let max_y = MINIPONG_GRID as i32 - 1;
        s.paddle_y = (s.paddle_y + dy).clamp(PADDLE_HALF, max_y - PADDLE_HALF);

        // Vertical motion with wall bounces.
        if s.ball_y + s.vel_y < 0 || s.ball_y + s.vel_y > max_y {
            s.vel_y = -s.vel_y;
        }
        s.ball_y += s.vel_y;

        // Horizontal motion: left wall bounces, paddle column scores.
        let mut reward = 0.0;
        if s.ball_x + s.vel_x < 0 {
            s.vel_x = 1;
        } else if s.ball_x + s.vel_x > BALL_MAX_X {
            if (s.ball_y - s.paddle_y).abs() <= PADDLE_HALF {
                s.vel_x = -1;
                s.rally += 1;
                reward = 1.0;
            } else {
                s.steps += 1;
                s.done = true;
                return Ok(StepResult { observation: self.observation(), reward: -1.0, done: true });
            }
        }
        s.ball_x += s.vel_x;

        s.steps += 1;
        if s.steps >= MINIPONG_EPISODE_CAP {
            s.done = true;
        }
        Ok(StepResult { observation: self.observation(), reward, done: self.state.done })
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot::MiniPong(self.state.clone())
    }

    fn restore(&mut self, snapshot: &Snapshot) -> Result<(), EnvError> {
        match snapshot {
            Snapshot::MiniPong(s) => {
                self.state = s.clone();
                Ok(())
            }
            _ => Err(EnvError::SnapshotKindMismatch),
        }
    }
}
