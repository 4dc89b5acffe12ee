//! Rules for combining noise estimates at a reverse step.
//!
//! These functions only touch noise estimates; all schedule arithmetic
//! lives in the samplers.

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum GuidanceRule {
    #[serde(rename = "none")]
    NoGuidance,
    Cfg { w: f64 },
    #[serde(rename = "classifier")]
    ClassifierGrad { w: f64 },
    #[serde(rename = "rescaled")]
    RescaledCfg { w: f64, phi: f64 },
}

impl GuidanceRule {
    pub fn validate(&self) -> Result<()> {
        let (w, phi) = match *self {
            GuidanceRule::NoGuidance => return Ok(()),
            GuidanceRule::Cfg { w } | GuidanceRule::ClassifierGrad { w } => (w, 0.0),
            GuidanceRule::RescaledCfg { w, phi } => (w, phi),
        };
        if !(w >= 0.0 && w.is_finite()) {
            return Err(LabError::Config(format!("guidance scale must be >= 0, got {w}")));
        }
        if !(0.0..=1.0).contains(&phi) {
            return Err(LabError::Config(format!("phi must lie in [0, 1], got {phi}")));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        match *self {
            GuidanceRule::NoGuidance => 0.0,
            GuidanceRule::Cfg { w } | GuidanceRule::ClassifierGrad { w } | GuidanceRule::RescaledCfg { w, .. } => w,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            GuidanceRule::NoGuidance => "none",
            GuidanceRule::Cfg { .. } => "cfg",
            GuidanceRule::ClassifierGrad { .. } => "classifier",
            GuidanceRule::RescaledCfg { .. } => "rescaled",
        }
    }
}

/// Classifier-free guidance: `(1 + w)·ε_c − w·ε_∅`, evaluated as
/// `ε_c + w·(ε_c − ε_∅)` so equal inputs come back unchanged.
pub fn cfg_combine(eps_cond: &Matrix, eps_uncond: &Matrix, w: f64) -> Result<Matrix> {
    eps_cond.ensure_same_shape(eps_uncond, "cfg_combine")?;
    let data = eps_cond
        .as_slice()
        .iter()
        .zip(eps_uncond.as_slice())
        .map(|(c, u)| c + w * (c - u))
        .collect();
    Matrix::from_vec(eps_cond.rows(), eps_cond.cols(), data)
}

/// Classifier guidance: `ε_c − w·σ_t·∇ log p(c | z_t)`.
pub fn classifier_guidance(eps_cond: &Matrix, grad_logp: &Matrix, w: f64, sigma_t: f64) -> Result<Matrix> {
    eps_cond.ensure_same_shape(grad_logp, "classifier_guidance")?;
    if !(sigma_t > 0.0) {
        return Err(LabError::Config(format!("sigma_t must be positive, got {sigma_t}")));
    }
    let k = w * sigma_t;
    let data = eps_cond
        .as_slice()
        .iter()
        .zip(grad_logp.as_slice())
        .map(|(e, g)| e - k * g)
        .collect();
    Matrix::from_vec(eps_cond.rows(), eps_cond.cols(), data)
}

/// Population standard deviation of one row, mean-centred.
pub fn row_std(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Guided estimate rescaled per row to the conditional estimate's spread,
/// then blended with the plain guided estimate:
/// `φ·x·(std(ε_c)/std(x)) + (1 − φ)·x` with `x = cfg_combine(ε_c, ε_∅, w)`.
pub fn rescaled_cfg(eps_cond: &Matrix, eps_uncond: &Matrix, w: f64, phi: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(LabError::Config(format!("phi must lie in [0, 1], got {phi}")));
    }
    let mut x = cfg_combine(eps_cond, eps_uncond, w)?;
    if phi == 0.0 {
        return Ok(x);
    }
    for i in 0..x.rows() {
        let sx = row_std(x.row(i));
        if sx == 0.0 {
            return Err(LabError::Degenerate(format!(
                "guided estimate has zero spread in row {i}"
            )));
        }
        let ratio = row_std(eps_cond.row(i)) / sx;
        for v in x.row_mut(i) {
            *v = phi * (*v * ratio) + (1.0 - phi) * *v;
        }
    }
    Ok(x)
}
