//! Perturbation generators over the approximator's current-observation
//! input: a random Gaussian baseline, FGSM, and PGD.
//!
//! All methods respect one l-inf budget epsilon. The stored delta is the
//! ball-projected perturbation; applying it clamps the perturbed
//! observation back into the environment's valid range, and the reported
//! norms are those of the post-clamp effective delta — an attacker cannot
//! push a sensor beyond its representable range.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{ApproximatorError, Seq2SeqModel};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack spec: {0}")]
    BadSpec(String),
    #[error("cannot match norms against an empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Approximator(#[from] ApproximatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Gaussian,
    Fgsm,
    Pgd,
}

impl AttackMethod {
    pub fn id(&self) -> &'static str {
        match self {
            AttackMethod::Gaussian => "gaussian",
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
        }
    }

    pub fn parse(s: &str) -> Option<AttackMethod> {
        match s {
            "gaussian" => Some(AttackMethod::Gaussian),
            "fgsm" => Some(AttackMethod::Fgsm),
            "pgd" => Some(AttackMethod::Pgd),
            _ => None,
        }
    }
}

/// Valid observation-value range of the attacked channel.
#[derive(Debug, Clone, Copy)]
pub struct ObsBounds {
    pub lo: f64,
    pub hi: f64,
}

impl ObsBounds {
    pub fn for_env(env: crate::envs::EnvKind) -> ObsBounds {
        let (lo, hi) = env.obs_bounds();
        ObsBounds { lo, hi }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    pub method: AttackMethod,
    /// l-inf budget. Zero is allowed and means the identity attack.
    pub epsilon: f64,
    pub pgd_iters: usize,
    pub pgd_alpha: f64,
    /// Which output step's action the attack tries to flip (0-based).
    pub target_step: usize,
    /// Gaussian-only: rescale the noise toward this l2 before boxing.
    pub gaussian_target_l2: Option<f64>,
}

impl AttackSpec {
    pub fn gaussian(epsilon: f64) -> AttackSpec {
        AttackSpec {
            method: AttackMethod::Gaussian,
            epsilon,
            pgd_iters: 1,
            pgd_alpha: epsilon,
            target_step: 0,
            gaussian_target_l2: None,
        }
    }

    pub fn fgsm(epsilon: f64) -> AttackSpec {
        AttackSpec {
            method: AttackMethod::Fgsm,
            epsilon,
            pgd_iters: 1,
            pgd_alpha: epsilon,
            target_step: 0,
            gaussian_target_l2: None,
        }
    }

    /// PGD defaults: 10 iterations at step size epsilon/4, zero init.
    pub fn pgd(epsilon: f64) -> AttackSpec {
        AttackSpec {
            method: AttackMethod::Pgd,
            epsilon,
            pgd_iters: 10,
            pgd_alpha: epsilon / 4.0,
            target_step: 0,
            gaussian_target_l2: None,
        }
    }

    pub fn for_method(method: AttackMethod, epsilon: f64) -> AttackSpec {
        match method {
            AttackMethod::Gaussian => AttackSpec::gaussian(epsilon),
            AttackMethod::Fgsm => AttackSpec::fgsm(epsilon),
            AttackMethod::Pgd => AttackSpec::pgd(epsilon),
        }
    }

    pub fn with_target_step(mut self, j: usize) -> AttackSpec {
        self.target_step = j;
        self
    }

    pub fn validate(&self, output_len: usize) -> Result<(), AttackError> {
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(AttackError::BadSpec(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.method == AttackMethod::Pgd {
            if self.pgd_iters == 0 {
                return Err(AttackError::BadSpec("pgd needs at least one iteration".into()));
            }
            if self.epsilon > 0.0 && self.pgd_alpha <= 0.0 {
                return Err(AttackError::BadSpec("pgd step size must be positive".into()));
            }
        }
        if self.target_step >= output_len {
            return Err(AttackError::BadSpec(format!(
                "target step {} out of range for m = {output_len}",
                self.target_step
            )));
        }
        Ok(())
    }
}

/// A bounded additive perturbation for one observation.
#[derive(Debug, Clone)]
pub struct Perturbation {
    /// Ball-projected delta (independent of the clamp rule).
    pub delta: Tensor,
    /// l2 norm of the post-clamp effective delta.
    pub l2: f64,
    /// l-inf norm of the post-clamp effective delta.
    pub linf: f64,
    pub target_step: usize,
    /// Whether the approximator's argmax at the target step changed.
    /// Always false for Gaussian noise, which never consults the model.
    pub predicted_flip: bool,
}

impl Perturbation {
    /// The observation the agent actually receives.
    pub fn apply(&self, clean: &Tensor, bounds: ObsBounds) -> Tensor {
        apply_clamped(clean, &self.delta, bounds)
    }
}

pub fn apply_clamped(clean: &Tensor, delta: &Tensor, bounds: ObsBounds) -> Tensor {
    assert_eq!(clean.shape(), delta.shape());
    let data = clean
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&c, &d)| (c + d).clamp(bounds.lo, bounds.hi))
        .collect();
    Tensor::new(clean.shape().to_vec(), data).expect("same shape")
}

fn effective_norms(clean: &Tensor, delta: &Tensor, bounds: ObsBounds) -> (f64, f64) {
    let applied = apply_clamped(clean, delta, bounds);
    let mut l2 = 0.0;
    let mut linf = 0.0f64;
    for (a, c) in applied.data().iter().zip(clean.data()) {
        let e = a - c;
        l2 += e * e;
        linf = linf.max(e.abs());
    }
    (l2.sqrt(), linf)
}

/// i.i.d. normal noise, rescaled toward the target l2 if given, then
/// clipped to the epsilon box. Never looks at the model.
pub fn gaussian_perturb(
    spec: &AttackSpec,
    clean: &Tensor,
    bounds: ObsBounds,
    rng: &mut ChaCha8Rng,
) -> Perturbation {
    let d = clean.numel();
    let mut raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut delta = Tensor::new(clean.shape().to_vec(), raw.clone()).expect("same shape");
    match spec.gaussian_target_l2 {
        Some(target) => {
            // Rescale the raw noise until the post-clamp effective l2 meets
            // the target (or saturates against the box and value clamps),
            // so the comparison really is at the same realized budget.
            let mut scale = 1.0;
            for _ in 0..16 {
                let boxed: Vec<f64> =
                    raw.iter().map(|v| (v * scale).clamp(-spec.epsilon, spec.epsilon)).collect();
                delta = Tensor::new(clean.shape().to_vec(), boxed).expect("same shape");
                let (l2, _) = effective_norms(clean, &delta, bounds);
                if l2 <= 0.0 || (l2 - target).abs() / target.max(1e-12) < 1e-3 {
                    break;
                }
                scale *= target / l2;
                if !scale.is_finite() || scale > 1e12 {
                    break;
                }
            }
        }
        None => {
            for v in raw.iter_mut() {
                *v = (*v * spec.epsilon).clamp(-spec.epsilon, spec.epsilon);
            }
            delta = Tensor::new(clean.shape().to_vec(), raw).expect("same shape");
        }
    }
    let (l2, linf) = effective_norms(clean, &delta, bounds);
    Perturbation { delta, l2, linf, target_step: spec.target_step, predicted_flip: false }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Single-step sign attack: epsilon * sign of the gradient of the target
/// step's cross-entropy (against the model's own clean argmax) w.r.t. the
/// current observation only.
pub fn fgsm_perturb(
    model: &Seq2SeqModel,
    spec: &AttackSpec,
    past_actions: &[usize],
    past_obs: &[&Tensor],
    clean: &Tensor,
    bounds: ObsBounds,
) -> Result<Perturbation, AttackError> {
    spec.validate(model.config().output_len)?;
    let j = spec.target_step;
    let label = model.predicted_action(past_actions, past_obs, clean, j)?;
    let (grad, _) = model.input_gradient(past_actions, past_obs, clean, j, label)?;
    let delta = grad.map(|g| spec.epsilon * sign(g));
    let (l2, linf) = effective_norms(clean, &delta, bounds);
    let applied = apply_clamped(clean, &delta, bounds);
    let flipped = model.predicted_action(past_actions, past_obs, &applied, j)? != label;
    Ok(Perturbation { delta, l2, linf, target_step: j, predicted_flip: flipped })
}

/// Iterated FGSM with projection onto the epsilon ball after every step;
/// zero init, early stop once the approximator's target-step argmax flips.
/// Gradients are evaluated at the clamped (as-delivered) iterate.
pub fn pgd_perturb(
    model: &Seq2SeqModel,
    spec: &AttackSpec,
    past_actions: &[usize],
    past_obs: &[&Tensor],
    clean: &Tensor,
    bounds: ObsBounds,
) -> Result<Perturbation, AttackError> {
    spec.validate(model.config().output_len)?;
    let j = spec.target_step;
    let label = model.predicted_action(past_actions, past_obs, clean, j)?;
    let mut delta = Tensor::zeros(clean.shape());

    for iter in 0..spec.pgd_iters {
        let applied = apply_clamped(clean, &delta, bounds);
        if iter > 0 && model.predicted_action(past_actions, past_obs, &applied, j)? != label {
            break;
        }
        let (grad, _) = model.input_gradient(past_actions, past_obs, &applied, j, label)?;
        for (dv, gv) in delta.data_mut().iter_mut().zip(grad.data()) {
            *dv = (*dv + spec.pgd_alpha * sign(*gv)).clamp(-spec.epsilon, spec.epsilon);
        }
    }

    let (l2, linf) = effective_norms(clean, &delta, bounds);
    let applied = apply_clamped(clean, &delta, bounds);
    let flipped = model.predicted_action(past_actions, past_obs, &applied, j)? != label;
    Ok(Perturbation { delta, l2, linf, target_step: j, predicted_flip: flipped })
}

/// Crafts a perturbation with whichever method the spec names.
pub fn perturb(
    model: &Seq2SeqModel,
    spec: &AttackSpec,
    past_actions: &[usize],
    past_obs: &[&Tensor],
    clean: &Tensor,
    bounds: ObsBounds,
    rng: &mut ChaCha8Rng,
) -> Result<Perturbation, AttackError> {
    match spec.method {
        AttackMethod::Gaussian => Ok(gaussian_perturb(spec, clean, bounds, rng)),
        AttackMethod::Fgsm => fgsm_perturb(model, spec, past_actions, past_obs, clean, bounds),
        AttackMethod::Pgd => pgd_perturb(model, spec, past_actions, past_obs, clean, bounds),
    }
}

/// Sets the Gaussian target l2 to the mean realized l2 of an adversarial
/// batch, enabling like-for-like reward and transfer comparisons.
pub fn match_norms(adversarial: &[Perturbation], spec: &AttackSpec) -> Result<AttackSpec, AttackError> {
    if adversarial.is_empty() {
        return Err(AttackError::EmptyBatch);
    }
    let mean = adversarial.iter().map(|p| p.l2).sum::<f64>() / adversarial.len() as f64;
    let mut matched = spec.clone();
    matched.gaussian_target_l2 = Some(mean);
    Ok(matched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{build_model, build_model_zero_init, HeadSpec, LayerSpec, Seq2SeqConfig};
    use crate::envs::EnvKind;
    use rand_chacha::rand_core::SeedableRng;

    fn cfg(n: usize, m: usize) -> Seq2SeqConfig {
        Seq2SeqConfig {
            env: EnvKind::CartPole,
            head: HeadSpec {
                obs_head: vec![LayerSpec::Lstm { units: 8 }, LayerSpec::Dense { units: 12 }],
                action_head: vec![LayerSpec::Lstm { units: 6 }, LayerSpec::Dense { units: 12 }],
                current_head: vec![LayerSpec::Dense { units: 12 }],
                embedding: 12,
            },
            input_len: n,
            output_len: m,
        }
    }

    fn inputs(n: usize) -> (Vec<usize>, Vec<Tensor>, Tensor) {
        let actions: Vec<usize> = (0..n).map(|i| (i + 1) % 2).collect();
        let obs: Vec<Tensor> =
            (0..n).map(|i| Tensor::from_vec(vec![0.08 * i as f64 - 0.2, 0.3, -0.4, 0.1])).collect();
        (actions, obs, Tensor::from_vec(vec![0.25, -0.5, 0.125, 0.0]))
    }

    const B: ObsBounds = ObsBounds { lo: -1.0, hi: 1.0 };

    #[test]
    fn fgsm_components_are_sign_valued() {
        let model = build_model(&cfg(4, 2), 3).unwrap();
        let (a, o, c) = inputs(4);
        let or: Vec<&Tensor> = o.iter().collect();
        let eps = 0.1;
        let p = fgsm_perturb(&model, &AttackSpec::fgsm(eps).with_target_step(1), &a, &or, &c, B).unwrap();
        for &d in p.delta.data() {
            assert!(d == 0.0 || d == eps || d == -eps, "component {d}");
        }
        if p.delta.data().iter().any(|&d| d != 0.0) {
            assert!((p.linf - eps).abs() < 1e-12);
        }
        assert!(p.linf <= eps + 1e-12);
    }

    #[test]
    fn zero_gradient_gives_zero_delta() {
        // Zero-init model: no gradient reaches the input.
        let model = build_model_zero_init(&cfg(3, 1)).unwrap();
        let (a, o, c) = inputs(3);
        let or: Vec<&Tensor> = o.iter().collect();
        let p = fgsm_perturb(&model, &AttackSpec::fgsm(0.3), &a, &or, &c, B).unwrap();
        assert!(p.delta.data().iter().all(|&d| d == 0.0));
        assert!(!p.predicted_flip);
        assert_eq!(p.l2, 0.0);
    }

    #[test]
    fn pgd_single_full_step_equals_fgsm_bit_exactly() {
        let model = build_model(&cfg(5, 3), 17).unwrap();
        let (a, o, c) = inputs(5);
        let or: Vec<&Tensor> = o.iter().collect();
        let eps = 0.07;
        let fgsm = fgsm_perturb(&model, &AttackSpec::fgsm(eps).with_target_step(2), &a, &or, &c, B).unwrap();
        let mut spec = AttackSpec::pgd(eps).with_target_step(2);
        spec.pgd_iters = 1;
        spec.pgd_alpha = eps;
        let pgd = pgd_perturb(&model, &spec, &a, &or, &c, B).unwrap();
        assert_eq!(fgsm.delta, pgd.delta);
        assert_eq!(fgsm.l2, pgd.l2);
        assert_eq!(fgsm.linf, pgd.linf);
        assert_eq!(fgsm.predicted_flip, pgd.predicted_flip);
    }

    #[test]
    fn pgd_stays_inside_the_ball() {
        let model = build_model(&cfg(4, 2), 23).unwrap();
        let (a, o, c) = inputs(4);
        let or: Vec<&Tensor> = o.iter().collect();
        let eps = 0.2;
        let p = pgd_perturb(&model, &AttackSpec::pgd(eps), &a, &or, &c, B).unwrap();
        assert!(p.delta.linf_norm() <= eps + 1e-12);
        assert!(p.linf <= eps + 1e-12);
    }

    #[test]
    fn gaussian_is_seeded_and_scales_to_zero() {
        let clean = Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let spec = AttackSpec::gaussian(0.25);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let p1 = gaussian_perturb(&spec, &clean, B, &mut r1);
        let p2 = gaussian_perturb(&spec, &clean, B, &mut r2);
        assert_eq!(p1.delta, p2.delta);

        let zero = AttackSpec::gaussian(0.0);
        let pz = gaussian_perturb(&zero, &clean, B, &mut r1);
        assert!(pz.delta.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn gaussian_hits_a_feasible_target_l2() {
        // Mid-range pixels: the rescaler should land on the target.
        let clean = Tensor::filled(&[64], 0.5);
        let mut spec = AttackSpec::gaussian(0.3);
        spec.gaussian_target_l2 = Some(0.62);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut total = 0.0;
        let runs = 50;
        for _ in 0..runs {
            total += gaussian_perturb(&spec, &clean, ObsBounds { lo: 0.0, hi: 1.0 }, &mut rng).l2;
        }
        let mean = total / runs as f64;
        assert!((mean - 0.62).abs() / 0.62 < 0.05, "mean matched l2 {mean}");

        // Boundary pixels (all zeros in a [0,1] channel): value clamping
        // eats negative components, and the rescaler compensates by
        // growing the survivors until the effective l2 meets the target.
        let boundary = Tensor::zeros(&[64]);
        let mut total = 0.0;
        for _ in 0..runs {
            total += gaussian_perturb(&spec, &boundary, ObsBounds { lo: 0.0, hi: 1.0 }, &mut rng).l2;
        }
        let mean = total / runs as f64;
        assert!((mean - 0.62).abs() / 0.62 < 0.05, "boundary matched l2 {mean}");
    }

    #[test]
    fn match_norms_takes_the_batch_mean() {
        let mk = |l2: f64| Perturbation {
            delta: Tensor::from_vec(vec![0.0]),
            l2,
            linf: 0.0,
            target_step: 0,
            predicted_flip: false,
        };
        let spec = AttackSpec::gaussian(0.5);
        let matched = match_norms(&[mk(0.6), mk(1.0)], &spec).unwrap();
        assert_eq!(matched.gaussian_target_l2, Some(0.8));
        let single = match_norms(&[mk(0.33)], &spec).unwrap();
        assert_eq!(single.gaussian_target_l2, Some(0.33));
        assert!(matches!(match_norms(&[], &spec), Err(AttackError::EmptyBatch)));
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::fgsm(-0.1).validate(1).is_err());
        assert!(AttackSpec::fgsm(0.1).with_target_step(3).validate(3).is_err());
        let mut bad = AttackSpec::pgd(0.1);
        bad.pgd_iters = 0;
        assert!(bad.validate(1).is_err());
        assert!(AttackSpec::pgd(0.1).validate(1).is_ok());
    }

    mod clamp_props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clamped_apply_respects_bounds_and_budget(
                clean in proptest::collection::vec(-1.0f64..1.0, 1..32),
                raw in proptest::collection::vec(-2.0f64..2.0, 1..32),
                eps in 0.0f64..0.9,
            ) {
                let d = clean.len().min(raw.len());
                let clean = Tensor::from_vec(clean[..d].to_vec());
                let delta = Tensor::from_vec(raw[..d].iter().map(|v| v.clamp(-eps, eps)).collect());
                let applied = apply_clamped(&clean, &delta, B);
                let (l2, linf) = effective_norms(&clean, &delta, B);
                for &v in applied.data() {
                    prop_assert!((-1.0..=1.0).contains(&v));
                }
                prop_assert!(linf <= eps + 1e-12);
                prop_assert!(l2 <= eps * (d as f64).sqrt() + 1e-9);
            }
        }
    }
}
