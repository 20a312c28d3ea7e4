//! Desk-scale laboratory for black-box attacks on reinforcement-learning agents.
//!
//! The pipeline: train small RL agents ([`agents`]) on toy environments
//! ([`envs`]), record their clean play ([`trajectory`]), fit a multi-head
//! sequence-to-sequence approximator to the recordings ([`approximator`]),
//! and mount gradient-based perturbation attacks through the approximator
//! ([`attacks`], [`harness`]) — all without ever reading the target agent's
//! internals. [`tensor`] is the shared numeric substrate; [`config`],
//! [`archive`] and [`csvout`] handle experiment configuration and durable
//! outputs.

pub mod agents;
pub mod approximator;
pub mod archive;
pub mod attacks;
pub mod cli;
pub mod config;
pub mod csvout;
pub mod envs;
pub mod harness;
pub mod tensor;
pub mod trajectory;

/// Mixes a base seed with a stream index so derived RNGs are decorrelated.
///
/// splitmix64 finalizer; stable across platforms.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_spread() {
        assert_eq!(derive_seed(0, 0), derive_seed(0, 0));
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(0, 0));
    }
}
