//! Central finite-difference checks for analytic gradients.

use super::ParamTensors;
use crate::{LabError, Result};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Flat index (tensor order) of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Compare `analytic` with `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every
/// parameter entry. `floor` keeps entries whose true gradient is near zero
/// from dividing rounding noise by a vanishing denominator.
pub fn check_gradient<P, F>(params: &P, analytic: &P, h: f64, floor: f64, mut f: F) -> Result<GradCheck>
where
    P: ParamTensors + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let expected = analytic.flatten();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if expected.len() != sizes.iter().sum::<usize>() {
        return Err(LabError::Shape("gradient and parameters differ in size".into()));
    }
    let mut probe = params.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries: expected.len(),
    };
    let mut flat = 0;
    for (k, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let original = probe.tensors()[k][i];
            probe.tensors_mut()[k][i] = original + h;
            let up = f(&probe)?;
            probe.tensors_mut()[k][i] = original - h;
            let down = f(&probe)?;
            probe.tensors_mut()[k][i] = original;
            let numeric = (up - down) / (2.0 * h);
            let a = expected[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if !rel.is_finite() {
                return Err(LabError::Numeric(format!("non-finite difference at entry {flat}")));
            }
            if rel > worst.max_rel_error {
                worst = GradCheck {
                    max_rel_error: rel,
                    worst_index: flat,
                    analytic: a,
                    numeric,
                    entries: expected.len(),
                };
            }
            flat += 1;
        }
    }
    Ok(worst)
}
