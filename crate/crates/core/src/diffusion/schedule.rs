use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Serializable description of a linear schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Per-step variances `beta_t` for `t = 1..=T` and their derived products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta_t` linearly interpolated from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = if timesteps == 1 {
            vec![beta_start]
        } else {
            let span = (timesteps - 1) as f64;
            (0..timesteps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Arbitrary `beta_t` values in `[0, 1)`. Zero entries give degenerate
    /// noise-free steps, which are useful for exercising exact identities.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// `beta_t`, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// One forward noising step, `sqrt(1 - beta_t) x + sqrt(beta_t) xi`.
    pub fn forward_step(&self, x_prev: &Tensor, t: usize, rng: &mut Rng) -> Result<Tensor> {
        self.check(t)?;
        let b = self.beta(t);
        let (keep, noise) = ((1.0 - b).sqrt(), b.sqrt());
        let mut out = x_prev.clone();
        for v in out.data_mut() {
            *v = keep * *v + noise * rng.normal();
        }
        Ok(out)
    }

    /// Closed-form marginal `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`; `t = 0` returns `x0`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if t != 0 {
            self.check(t)?;
        }
        let ab = self.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, "q_sample", |x, e| s * x + n * e)
    }

    /// Reverse update `(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(1 - beta_t) + sqrt(beta_t) xi`.
    pub fn reverse_step(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor, xi: Option<&Tensor>) -> Result<Tensor> {
        self.check(t)?;
        let b = self.beta(t);
        let coef = b / (1.0 - self.alpha_bar(t)).sqrt();
        let inv = 1.0 / (1.0 - b).sqrt();
        let mut out = x_t.zip_map(eps_hat, "reverse_step", |x, e| (x - coef * e) * inv)?;
        if let Some(xi) = xi {
            let s = b.sqrt();
            out = out.zip_map(xi, "reverse_step", |x, z| x + s * z)?;
        }
        Ok(out)
    }
}
