use crate::{LabError, Result};

const MAX_PERIOD: f64 = 1e4;

/// Sinusoidal timestep features: entries `2k` and `2k+1` hold `sin(t·ω_k)`
/// and `cos(t·ω_k)` with `ω_k = 10⁴^(−k/(dim/2 − 1))`, so the frequency
/// divisors run geometrically from 1 to 10⁴. `max_t` only bounds `t`.
pub fn sinusoidal_embed(t: usize, dim: usize, max_t: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(LabError::Config(format!("embedding dim must be even and positive, got {dim}")));
    }
    if t > max_t {
        return Err(LabError::Index(format!("timestep {t} exceeds {max_t}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let phase = t as f64 * frequency(k, half);
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

fn frequency(k: usize, half: usize) -> f64 {
    if half == 1 {
        1.0
    } else {
        MAX_PERIOD.powf(-(k as f64) / (half - 1) as f64)
    }
}
