//! Reverse-process samplers (DDPM ancestral, DDIM on a timestep
//! subsequence) with a guidance rule applied to the noise estimate at
//! every step.
//!
//! Each output row owns a random stream derived from `(seed, row id)`, so
//! a row's trajectory does not depend on batch composition or on how rows
//! are split across worker threads.

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionToken, Denoiser, NoiseClassifier, DATA_DIM};
use crate::diffusion::NoiseSchedule;
use crate::guidance::{cfg_combine, classifier_guidance, rescaled_cfg, GuidanceRule};
use crate::numerics::{Matrix, RandomStream};
use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub n_steps: usize,
    /// DDIM stochasticity; 0 is deterministic.
    pub eta: f64,
    pub guidance: GuidanceRule,
    pub n_samples: usize,
    pub condition: ConditionToken,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let t_max = schedule.len();
        if self.n_steps == 0 || self.n_steps > t_max {
            return Err(LabError::Config(format!("n_steps must lie in 1..={t_max}, got {}", self.n_steps)));
        }
        if self.kind == SamplerKind::Ddpm && self.n_steps != t_max {
            return Err(LabError::Config(format!("DDPM runs all {t_max} steps, got {}", self.n_steps)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(LabError::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.n_samples == 0 {
            return Err(LabError::Config("n_samples must be positive".into()));
        }
        self.guidance.validate()?;
        if self.guidance != GuidanceRule::NoGuidance && self.condition == ConditionToken::Null {
            return Err(LabError::Config("guided sampling needs a class condition".into()));
        }
        Ok(())
    }
}

/// `n_steps` timesteps from `T` down to 1, evenly spaced by floor of the
/// linear interpolation, strictly decreasing.
pub fn timestep_subsequence(t_max: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > t_max {
        return Err(LabError::Config(format!("n_steps must lie in 1..={t_max}, got {n_steps}")));
    }
    if n_steps == 1 {
        return Ok(vec![t_max]);
    }
    let span = t_max - 1;
    let gaps = n_steps - 1;
    let mut seq: Vec<usize> = (0..n_steps)
        .map(|i| t_max - (i * span).div_ceil(gaps))
        .collect();
    seq.dedup();
    Ok(seq)
}

fn check_streams(z: &Matrix, streams: &[RandomStream]) -> Result<()> {
    if streams.len() != z.rows() {
        return Err(LabError::Shape(format!(
            "{} noise streams for {} rows",
            streams.len(),
            z.rows()
        )));
    }
    Ok(())
}

/// One DDIM update from `t` to `t_prev` (`t_prev = 0` returns the clean
/// estimate). Only consumes randomness when `eta > 0`.
pub fn ddim_step(
    z_t: &Matrix,
    eps: &Matrix,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    streams: &mut [RandomStream],
) -> Result<Matrix> {
    z_t.ensure_same_shape(eps, "ddim_step")?;
    schedule.check_t(t)?;
    if t_prev > t {
        return Err(LabError::Config(format!("t_prev {t_prev} after t {t}")));
    }
    if !(eta >= 0.0) {
        return Err(LabError::Config(format!("eta must be >= 0, got {eta}")));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
    let dir2 = 1.0 - ab_prev - sigma * sigma;
    if dir2 < -1e-15 {
        return Err(LabError::Config(format!(
            "eta = {eta} gives noise variance above 1 - alpha_bar at t = {t_prev}"
        )));
    }
    let dir = dir2.max(0.0).sqrt();
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let sa_prev = ab_prev.sqrt();
    let stochastic = sigma > 0.0;
    if stochastic {
        check_streams(z_t, streams)?;
    }
    let mut out = Matrix::zeros(z_t.rows(), z_t.cols());
    for i in 0..z_t.rows() {
        let xi = if stochastic { Some(streams[i].normal_pair()) } else { None };
        for j in 0..z_t.cols() {
            let e = eps.get(i, j);
            let x0 = (z_t.get(i, j) - sb * e) / sa;
            let mut v = sa_prev * x0 + dir * e;
            if let Some(xi) = xi {
                v += sigma * xi[j % 2];
            }
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// One ancestral DDPM step `t → t−1`, adding `σ_t·ξ` unless `t = 1`.
pub fn ddpm_step(
    z_t: &Matrix,
    eps: &Matrix,
    t: usize,
    schedule: &NoiseSchedule,
    streams: &mut [RandomStream],
) -> Result<Matrix> {
    z_t.ensure_same_shape(eps, "ddpm_step")?;
    schedule.check_t(t)?;
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let sigma = schedule.sigma(t);
    if t > 1 {
        check_streams(z_t, streams)?;
    }
    let mut out = Matrix::zeros(z_t.rows(), z_t.cols());
    for i in 0..z_t.rows() {
        let xi = if t > 1 { Some(streams[i].normal_pair()) } else { None };
        for j in 0..z_t.cols() {
            let mut v = (z_t.get(i, j) - coef * eps.get(i, j)) * inv_sqrt_alpha;
            if let Some(xi) = xi {
                v += sigma * xi[j % 2];
            }
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// What a sampling run did, for instrumentation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SamplerTrace {
    /// `(t, t_prev)` of every stepper call, in order.
    pub steps: Vec<(usize, usize)>,
    /// Rows evaluated by the denoiser, both branches counted.
    pub denoiser_rows: usize,
    pub classifier_rows: usize,
}

fn guided_eps(
    denoiser: &Denoiser,
    classifier: Option<&NoiseClassifier>,
    config: &SamplerConfig,
    z: &Matrix,
    t: usize,
    schedule: &NoiseSchedule,
    trace: &mut SamplerTrace,
) -> Result<Matrix> {
    let rows = z.rows();
    let ts = vec![t; rows];
    let cond = vec![config.condition; rows];
    let null = vec![ConditionToken::Null; rows];
    match config.guidance {
        GuidanceRule::NoGuidance => {
            trace.denoiser_rows += rows;
            denoiser.predict_eps(z, &ts, &cond, schedule)
        }
        GuidanceRule::Cfg { w } => {
            trace.denoiser_rows += 2 * rows;
            let c = denoiser.predict_eps(z, &ts, &cond, schedule)?;
            let u = denoiser.predict_eps(z, &ts, &null, schedule)?;
            cfg_combine(&c, &u, w)
        }
        GuidanceRule::RescaledCfg { w, phi } => {
            trace.denoiser_rows += 2 * rows;
            let c = denoiser.predict_eps(z, &ts, &cond, schedule)?;
            let u = denoiser.predict_eps(z, &ts, &null, schedule)?;
            rescaled_cfg(&c, &u, w, phi)
        }
        GuidanceRule::ClassifierGrad { w } => {
            let cl = classifier
                .ok_or_else(|| LabError::Config("classifier guidance needs a trained classifier".into()))?;
            let ConditionToken::Class(k) = config.condition else {
                return Err(LabError::Config("classifier guidance needs a class condition".into()));
            };
            trace.denoiser_rows += rows;
            trace.classifier_rows += rows;
            let c = denoiser.predict_eps(z, &ts, &cond, schedule)?;
            let g = cl.grad_log_prob(z, &ts, &vec![k; rows], schedule)?;
            classifier_guidance(&c, &g, w, schedule.sigma(t))
        }
    }
}

/// Rows per sequential block; keeps activations cache-resident.
const BLOCK_ROWS: usize = 512;

fn run_rows(
    denoiser: &Denoiser,
    classifier: Option<&NoiseClassifier>,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    row_ids: &[u64],
) -> Result<(Matrix, SamplerTrace)> {
    let mut blocks = Vec::with_capacity(row_ids.len().div_ceil(BLOCK_ROWS));
    let mut trace = SamplerTrace::default();
    for ids in row_ids.chunks(BLOCK_ROWS) {
        let (z, tr) = run_block(denoiser, classifier, config, schedule, ids)?;
        blocks.push(z);
        trace.steps = tr.steps;
        trace.denoiser_rows += tr.denoiser_rows;
        trace.classifier_rows += tr.classifier_rows;
    }
    Ok((Matrix::vstack(&blocks)?, trace))
}

fn run_block(
    denoiser: &Denoiser,
    classifier: Option<&NoiseClassifier>,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    row_ids: &[u64],
) -> Result<(Matrix, SamplerTrace)> {
    let root = RandomStream::new(config.seed);
    let mut streams: Vec<RandomStream> = row_ids.iter().map(|&r| root.derive(r)).collect();
    let mut data = Vec::with_capacity(row_ids.len() * DATA_DIM);
    for s in &mut streams {
        data.extend_from_slice(&s.normal_pair());
    }
    let mut z = Matrix::from_vec(row_ids.len(), DATA_DIM, data)?;
    let mut trace = SamplerTrace::default();
    let t_max = schedule.len();
    let pairs: Vec<(usize, usize)> = match config.kind {
        SamplerKind::Ddpm => (1..=t_max).rev().map(|t| (t, t - 1)).collect(),
        SamplerKind::Ddim => {
            let seq = timestep_subsequence(t_max, config.n_steps)?;
            seq.iter()
                .enumerate()
                .map(|(i, &t)| (t, seq.get(i + 1).copied().unwrap_or(0)))
                .collect()
        }
    };
    for (t, t_prev) in pairs {
        let eps = guided_eps(denoiser, classifier, config, &z, t, schedule, &mut trace)?;
        z = match config.kind {
            SamplerKind::Ddpm => ddpm_step(&z, &eps, t, schedule, &mut streams)?,
            SamplerKind::Ddim => ddim_step(&z, &eps, t, t_prev, schedule, config.eta, &mut streams)?,
        };
        trace.steps.push((t, t_prev));
    }
    if !z.is_finite() {
        return Err(LabError::Numeric("sampler produced non-finite values".into()));
    }
    Ok((z, trace))
}

/// Samples for the given row ids, split across `workers` threads.
pub fn generate_rows(
    denoiser: &Denoiser,
    classifier: Option<&NoiseClassifier>,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    row_ids: &[u64],
    workers: usize,
) -> Result<(Matrix, SamplerTrace)> {
    config.validate(schedule)?;
    if matches!(config.guidance, GuidanceRule::ClassifierGrad { .. }) && classifier.is_none() {
        return Err(LabError::Config("classifier guidance needs a trained classifier".into()));
    }
    let workers = workers.clamp(1, row_ids.len().max(1));
    if workers == 1 {
        return run_rows(denoiser, classifier, config, schedule, row_ids);
    }
    let chunk = row_ids.len().div_ceil(workers);
    let results: Vec<Result<(Matrix, SamplerTrace)>> = std::thread::scope(|s| {
        let handles: Vec<_> = row_ids
            .chunks(chunk)
            .map(|ids| s.spawn(move || run_rows(denoiser, classifier, config, schedule, ids)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler worker panicked"))
            .collect()
    });
    let mut blocks = Vec::with_capacity(results.len());
    let mut trace = SamplerTrace::default();
    for r in results {
        let (m, tr) = r?;
        blocks.push(m);
        trace.steps = tr.steps;
        trace.denoiser_rows += tr.denoiser_rows;
        trace.classifier_rows += tr.classifier_rows;
    }
    Ok((Matrix::vstack(&blocks)?, trace))
}

/// `config.n_samples` samples, rows `0..n`.
pub fn generate(
    denoiser: &Denoiser,
    classifier: Option<&NoiseClassifier>,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Matrix> {
    let ids: Vec<u64> = (0..config.n_samples as u64).collect();
    Ok(generate_rows(denoiser, classifier, config, schedule, &ids, 1)?.0)
}
