//! Noise schedules and the closed-form forward process.
//!
//! Timesteps are 1-indexed at every public boundary (`1..=T`); the arrays
//! inside [`NoiseSchedule`] are 0-indexed, so timestep `t` lives at `t - 1`.

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `beta` from `beta_start` to `beta_end`, both included.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(LabError::Config(format!("need T >= 2, got {timesteps}")));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(LabError::Config(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let step = (beta_end - beta_start) / (timesteps - 1) as f64;
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| {
                if i + 1 == timesteps {
                    beta_end
                } else {
                    beta_start + step * i as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(LabError::Config("betas must lie in (0, 1), T >= 2".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        // Betas below half an ulp of 1, or products that underflow, would
        // leave alpha_bar flat; later steps divide by it, so refuse those.
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) || !(alpha_bar[0] < 1.0 && acc > 0.0) {
            return Err(LabError::Config("alpha_bar must decrease strictly and stay positive".into()));
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(LabError::Index(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Reverse-step noise scale `σ_t = √β_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε`, row by row.
pub fn q_sample(z0: &Matrix, t: &[usize], eps: &Matrix, schedule: &NoiseSchedule) -> Result<Matrix> {
    z0.ensure_same_shape(eps, "q_sample eps")?;
    if t.len() != z0.rows() {
        return Err(LabError::Shape(format!(
            "{} timesteps for {} rows",
            t.len(),
            z0.rows()
        )));
    }
    let mut out = Matrix::zeros(z0.rows(), z0.cols());
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_t(ti)?;
        let ab = schedule.alpha_bar(ti);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((o, x), e) in out.row_mut(i).iter_mut().zip(z0.row(i)).zip(eps.row(i)) {
            *o = a * x + b * e;
        }
    }
    Ok(out)
}
