//! Variance-preserving forward-process noise schedule.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Linear-beta schedule with precomputed cumulative products.
///
/// Timesteps are 1-based: `t` in `1..=T`, with `alpha_bar(0) = 1` so that
/// timestep 0 denotes the clean latent.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<Real>,
    /// `alpha_bar[t]` for `t` in `0..=T`; `alpha_bar[0] = 1`.
    alpha_bars: Vec<Real>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_min` to `beta_max` over `t_max` steps.
    pub fn linear(t_max: usize, beta_min: Real, beta_max: Real) -> Self {
        assert!(t_max >= 1);
        let betas: Vec<Real> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as Real / (t_max - 1) as Real
                }
            })
            .collect();
        Self::from_betas(betas).expect("linear schedule is valid by construction")
    }

    /// Build from explicit betas, validating monotonicity and range.
    pub fn from_betas(betas: Vec<Real>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one beta".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("beta[{i}] = {b} outside (0,1)")));
            }
            if i > 0 && betas[i - 1] >= b {
                return Err(Error::Config(format!(
                    "betas must be strictly increasing, violated at index {i}"
                )));
            }
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// Default schedule used across the toolkit.
    ///
    /// Betas are scaled so the forward process terminates close to a
    /// standard Gaussian (`alpha_bar(T) ~ 0.005`), which from-noise
    /// sampling relies on.
    pub fn default_toy() -> Self {
        Self::linear(100, 1e-3, 1e-1)
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// Cumulative product of alphas; valid for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Real {
        self.alpha_bars[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max() {
            return Err(Error::Argument(format!(
                "timestep {t} out of range 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    /// Coefficients `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))` of the
    /// forward-process marginal.
    pub fn marginal_coeffs(&self, t: usize) -> (Real, Real) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}
