//! Spatial Perturbation Learning: sign-gradient ascent on the combined
//! conditional + latent loss, projected to the l-infinity pixel budget.

use crate::error::{Error, Result};
use crate::fpl::{project_spatial, sign};
use crate::ldm::{cond_loss_frozen_var, encode_var, ImageTensor, LatentCode, ModelParams};
use crate::localization::{filter_delta, BinaryMask};
use crate::nn::Binder;
use crate::prompt::PromptCondition;
use crate::tensor::{backward, Real, Tape};
use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Spatial attack settings.
#[derive(Clone, Debug)]
pub struct SpatialAttackConfig {
    /// Weight of the latent loss in the combined objective.
    pub xi: Real,
    /// Sign-step size in pixel space.
    pub gamma_l: Real,
    /// l-infinity pixel budget around the clean image.
    pub eta: Real,
    pub steps: usize,
}

impl Default for SpatialAttackConfig {
    fn default() -> Self {
        SpatialAttackConfig {
            xi: 1.0,
            gamma_l: 0.005,
            eta: 12.0 / 255.0,
            steps: 9,
        }
    }
}

impl SpatialAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma_l && self.gamma_l <= self.eta) {
            return Err(Error::Config(format!(
                "gamma_l {} must lie in (0, eta={}]",
                self.gamma_l, self.eta
            )));
        }
        if !(0.0 < self.eta && self.eta < 1.0) {
            return Err(Error::Config("eta must lie in (0,1)".into()));
        }
        if self.xi < 0.0 {
            return Err(Error::Config("xi must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean squared distance between the latent of `x_adv` and a cached clean
/// latent.
pub fn latent_loss(params: &ModelParams, x_adv: &ImageTensor, z0_clean: &LatentCode) -> Real {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &params.tensors);
    let xv = tape.constant(crate::ldm::stack_images(std::slice::from_ref(x_adv)));
    let z = encode_var(&binder, &params.arch, xv);
    let zc = tape.constant(z0_clean.data.clone().insert_axis(Axis(0)).into_dyn());
    z.mse(zc).scalar_value()
}

/// Combined spatial objective `L_cond + xi * L_latent` with `(t, eps)` drawn
/// from `rng`.
pub fn spl_loss(
    params: &ModelParams,
    x_adv: &ImageTensor,
    z0_clean: &LatentCode,
    cond: &PromptCondition,
    rng: &mut ChaCha8Rng,
    xi: Real,
) -> Result<Real> {
    let ts = vec![rng.random_range(1..=params.schedule.t_max())];
    let [lc, lh, lw] = params.arch.latent_shape();
    let eps = ArrayD::from_shape_fn(IxDyn(&[1, lc, lh, lw]), |_| {
        rng.sample::<Real, _>(StandardNormal)
    });
    let (loss, _) = spl_loss_grad(params, x_adv.data(), z0_clean, cond, &ts, &eps, xi)?;
    Ok(loss)
}

/// Loss and image gradient of the combined spatial objective with frozen
/// `(t, eps)`.
pub fn spl_loss_grad(
    params: &ModelParams,
    x_adv: &Array3<Real>,
    z0_clean: &LatentCode,
    cond: &PromptCondition,
    ts: &[usize],
    eps: &ArrayD<Real>,
    xi: Real,
) -> Result<(Real, Array3<Real>)> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &params.tensors);
    let xv = tape.leaf(x_adv.clone().insert_axis(Axis(0)).into_dyn());
    let z = encode_var(&binder, &params.arch, xv);
    let cond_term = cond_loss_frozen_var(&binder, &params.arch, &params.schedule, z, cond, ts, eps);
    let zc = tape.constant(z0_clean.data.clone().insert_axis(Axis(0)).into_dyn());
    let loss = if xi != 0.0 {
        cond_term.add(z.mse(zc).scale(xi))
    } else {
        cond_term
    };
    let l = loss.scalar_value();
    if !l.is_finite() {
        return Err(Error::Numeric(format!("non-finite spatial attack loss {l}")));
    }
    let grads = backward(loss);
    let g = grads
        .wrt_or_zeros(xv)
        .index_axis_move(Axis(0), 0)
        .into_dimensionality()
        .expect("image rank");
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite spatial gradient".into()));
    }
    Ok((l, g))
}

/// One projected sign-gradient ascent step:
/// `clip_[0,1]( clip_eta( x_adv + gamma_l * sign(grad) ) )`.
pub fn spl_step(
    x_adv: &Array3<Real>,
    x_clean: &Array3<Real>,
    grad: &Array3<Real>,
    cfg: &SpatialAttackConfig,
) -> Array3<Real> {
    let mut stepped = x_adv.clone();
    stepped.zip_mut_with(grad, |v, &g| *v += cfg.gamma_l * sign(g));
    project_spatial(&stepped, x_clean, cfg.eta)
}

/// One full spatial iteration: gradient at the current iterate, optional
/// mask filtering, projected step. Returns the new image and the loss at the
/// old iterate.
pub fn spl_iteration(
    params: &ModelParams,
    x_adv: &Array3<Real>,
    x_clean: &Array3<Real>,
    z0_clean: &LatentCode,
    cond: &PromptCondition,
    cfg: &SpatialAttackConfig,
    mask: Option<&BinaryMask>,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<Real>, Real)> {
    cfg.validate()?;
    let ts = vec![rng.random_range(1..=params.schedule.t_max())];
    let [lc, lh, lw] = params.arch.latent_shape();
    let eps = ArrayD::from_shape_fn(IxDyn(&[1, lc, lh, lw]), |_| {
        rng.sample::<Real, _>(StandardNormal)
    });
    let (loss, g) = spl_loss_grad(params, x_adv, z0_clean, cond, &ts, &eps, cfg.xi)?;
    let g = match mask {
        Some(m) => m.apply_to(&g),
        None => g,
    };
    let x_new = spl_step(x_adv, x_clean, &g, cfg);
    let x_new = filter_delta(x_clean, &x_new, mask);
    Ok((x_new, loss))
}

/// Standalone spatial attack: `cfg.steps` iterations from the clean image
/// against a fine-tuned surrogate. The clean latent is cached once.
pub fn spl_attack(
    x_clean: &ImageTensor,
    surrogate: &ModelParams,
    cond: &PromptCondition,
    cfg: &SpatialAttackConfig,
    mask: Option<&BinaryMask>,
    seed: u64,
) -> Result<ImageTensor> {
    use rand::SeedableRng;
    cfg.validate()?;
    let z0_clean = surrogate.encode(x_clean)?;
    let clean = x_clean.data().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_adv = clean.clone();
    for _ in 0..cfg.steps {
        let (x_new, _loss) = spl_iteration(
            surrogate, &x_adv, &clean, &z0_clean, cond, cfg, mask, &mut rng,
        )?;
        x_adv = x_new;
    }
    ImageTensor::new(x_adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldm::ModelVersion;
    use crate::prompt::Vocabulary;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn toy_model() -> ModelParams {
        ModelParams::init(ModelVersion::VA, Vocabulary::default_toy(8), 21)
    }

    fn rand_image(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((3, 64, 64), |_| rng.random::<Real>())).unwrap()
    }

    #[test]
    fn latent_loss_identity_and_symmetry() {
        let m = toy_model();
        let x = rand_image(1);
        let z = m.encode(&x).unwrap();
        assert_eq!(latent_loss(&m, &x, &z), 0.0);

        let y = rand_image(2);
        let zy = m.encode(&y).unwrap();
        // symmetric under swapping the two latents
        let a = latent_loss(&m, &x, &zy);
        let b = latent_loss(&m, &y, &z);
        let direct_ab = (&z.data - &zy.data).mapv(|v| v * v).mean().unwrap();
        assert!((a - direct_ab).abs() < 1e-12);
        assert!((b - direct_ab).abs() < 1e-12);
    }

    #[test]
    fn latent_loss_grad_matches_finite_differences() {
        let m = toy_model();
        let x = rand_image(3);
        let clean = rand_image(4);
        let z0 = m.encode(&clean).unwrap();
        // isolate the latent term by using xi large with zero cond weight:
        // instead check the full objective gradient with xi=1 via spl path,
        // and the pure latent gradient via a direct graph.
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &m.tensors);
        let xv = tape.leaf(x.data().clone().insert_axis(Axis(0)).into_dyn());
        let zv = encode_var(&binder, &m.arch, xv);
        let zc = tape.constant(z0.data.clone().insert_axis(Axis(0)).into_dyn());
        let loss = zv.mse(zc);
        let grads = backward(loss);
        let g = grads.wrt_or_zeros(xv);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let step = 1e-3;
        for _ in 0..10 {
            let c = rng.random_range(0..3);
            let i = rng.random_range(0..64);
            let j = rng.random_range(0..64);
            let eval = |delta: Real| {
                let mut d = x.data().clone();
                d[[c, i, j]] += delta;
                latent_loss(&m, &ImageTensor::from_clamped(d), &z0)
            };
            let num = (eval(step) - eval(-step)) / (2.0 * step);
            let ana = g[[0, c, i, j]];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                (num - ana).abs() / denom <= 1e-3,
                "latent grad mismatch at ({c},{i},{j}): {num} vs {ana}"
            );
        }
    }

    #[test]
    fn spl_loss_xi_zero_reduces_to_cond_loss() {
        let m = toy_model();
        let x = rand_image(6);
        let clean = rand_image(7);
        let z0 = m.encode(&clean).unwrap();
        let cond = crate::prompt::subject_prompt(&m.vocab, 0).unwrap();
        let ts = vec![30usize];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let [lc, lh, lw] = m.arch.latent_shape();
        let eps = ArrayD::from_shape_fn(IxDyn(&[1, lc, lh, lw]), |_| {
            rng.sample::<Real, _>(StandardNormal)
        });
        let (l0, _) = spl_loss_grad(&m, x.data(), &z0, &cond, &ts, &eps, 0.0).unwrap();
        let (l1, _) = spl_loss_grad(&m, x.data(), &z0, &cond, &ts, &eps, 1.0).unwrap();
        let lat = latent_loss(&m, &x, &z0);
        assert!((l1 - (l0 + lat)).abs() < 1e-9);
        assert!(l1 >= 1.0 * lat, "combined loss cannot undercut xi * latent");
        // fixed-seed determinism of the sampled variant
        let a = spl_loss(&m, &x, &z0, &cond, &mut ChaCha8Rng::seed_from_u64(9), 1.0).unwrap();
        let b = spl_loss(&m, &x, &z0, &cond, &mut ChaCha8Rng::seed_from_u64(9), 1.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn spl_step_budget_and_sign_arithmetic() {
        let cfg = SpatialAttackConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let clean = Array3::from_shape_fn((3, 8, 8), |_| rng.random::<Real>() * 0.5 + 0.25);
        let mut x = clean.clone();
        let grad = Array3::from_shape_fn((3, 8, 8), |_| rng.random::<Real>() - 0.5);
        // single step moves each unconstrained pixel by exactly gamma_l
        let x1 = spl_step(&x, &clean, &grad, &cfg);
        for ((a, b), g) in x1.iter().zip(clean.iter()).zip(grad.iter()) {
            assert!(((a - b).abs() - cfg.gamma_l).abs() < 1e-12 || *g == 0.0);
        }
        // after many steps the budget still holds
        for _ in 0..20 {
            x = spl_step(&x, &clean, &grad, &cfg);
        }
        let maxdev = (&x - &clean).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(maxdev <= cfg.eta + 1e-12, "budget violated: {maxdev}");
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // zero gradient leaves the iterate unchanged
        let same = spl_step(&x, &clean, &Array3::zeros((3, 8, 8)), &cfg);
        assert_eq!(same, x);
    }

    #[test]
    fn masked_attack_never_touches_masked_out_pixels() {
        let m = toy_model();
        let x = rand_image(11);
        let cond = crate::prompt::subject_prompt(&m.vocab, 1).unwrap();
        let cfg = SpatialAttackConfig {
            steps: 3,
            ..Default::default()
        };
        let mask = BinaryMask {
            mask: Array2::from_shape_fn((64, 64), |(i, _)| if i < 32 { 1.0 } else { 0.0 }),
            tau: 0.5,
        };
        let out = spl_attack(&x, &m, &cond, &cfg, Some(&mask), 77).unwrap();
        for c in 0..3 {
            for i in 0..64 {
                for j in 0..64 {
                    if i >= 32 {
                        assert_eq!(out.data()[[c, i, j]], x.data()[[c, i, j]]);
                    }
                }
            }
        }
        // all-zeros mask: output equals the clean image exactly
        let zero_mask = BinaryMask {
            mask: Array2::zeros((64, 64)),
            tau: 0.5,
        };
        let out = spl_attack(&x, &m, &cond, &cfg, Some(&zero_mask), 77).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SpatialAttackConfig::default();
        cfg.gamma_l = 0.0;
        assert!(cfg.validate().is_err());
        cfg.gamma_l = 0.2; // above eta
        assert!(cfg.validate().is_err());
        let cfg = SpatialAttackConfig::default();
        assert!(cfg.validate().is_ok());
    }
}
