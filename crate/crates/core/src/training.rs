//! Training objectives and the optimisation loop.
//!
//! Two objectives are supported:
//!
//! * `Standard`: the plain denoising loss `‖ε − ε_θ(z_t, c)‖²`, with the
//!   condition replaced by the null token at rate `p_uncond`.
//! * `Updated`: the loss of the guided estimate actually used at sampling
//!   time, `‖ε − (1+w)·ε_θ(z_t, c) + w·ε_θ(z_t, ∅)‖²`. Both branches are
//!   evaluated on the same `(z_t, ε)` every step and the gradient flows
//!   through both into the shared parameters, so a step costs two forward
//!   and two backward passes per example.
//!
//! Losses are means over all `batch × 2` elements.

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionToken, Denoiser, DenoiserConfig, NoiseClassifier, DATA_DIM};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::evaldata::{sample_mixture, MixtureSpec};
use crate::guidance::cfg_combine;
use crate::numerics::{adam_step, AdamHyper, AdamState, Matrix, ParamTensors, RandomStream};
use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Standard,
    Updated,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Standard => "standard",
            LossMode::Updated => "updated",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    /// Guidance scale baked into the updated loss.
    pub w_train: f64,
    /// Null-token rate; only used by the standard loss.
    pub p_uncond: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamHyper,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::Standard,
            w_train: 1.0,
            p_uncond: 0.1,
            batch_size: 256,
            steps: 20_000,
            adam: AdamHyper::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_train >= 0.0 && self.w_train.is_finite()) {
            return Err(LabError::Config(format!("w_train must be >= 0, got {}", self.w_train)));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(LabError::Config(format!("p_uncond must lie in [0, 1], got {}", self.p_uncond)));
        }
        if self.batch_size == 0 {
            return Err(LabError::Config("batch_size must be positive".into()));
        }
        self.adam.validate()
    }
}

/// A batch of clean data with class labels.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub z0: Matrix,
    pub classes: Vec<usize>,
}

/// Network rows pushed through forward and backward passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCount {
    pub forward_rows: usize,
    pub backward_rows: usize,
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub loss: f64,
    pub grads: Denoiser,
    pub passes: PassCount,
    /// Examples that were trained with the null token.
    pub null_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub passes: PassCount,
    pub null_tokens: usize,
}

/// Replace a class condition by the null token with probability `p_uncond`.
pub fn dropout_condition(c: ConditionToken, p_uncond: f64, stream: &mut RandomStream) -> ConditionToken {
    if stream.bernoulli(p_uncond) {
        ConditionToken::Null
    } else {
        c
    }
}

fn mean_square(residual: &Matrix) -> f64 {
    let n = residual.as_slice().len().max(1) as f64;
    residual.as_slice().iter().map(|r| r * r).sum::<f64>() / n
}

pub fn loss_standard(eps: &Matrix, eps_hat: &Matrix) -> Result<f64> {
    Ok(mean_square(&eps.lincomb(1.0, eps_hat, -1.0)?))
}

pub fn loss_updated(eps: &Matrix, eps_cond_hat: &Matrix, eps_uncond_hat: &Matrix, w: f64) -> Result<f64> {
    eps_cond_hat.ensure_same_shape(eps_uncond_hat, "loss_updated")?;
    let guided = cfg_combine(eps_cond_hat, eps_uncond_hat, w)?;
    loss_standard(eps, &guided)
}

/// Loss and parameter gradient for one batch, without updating the model.
///
/// Randomness is drawn in a fixed order: timesteps for every row, then the
/// noise, then (standard loss only) the dropout decisions. Both modes
/// therefore see identical `(t, ε)` when started from the same stream.
pub fn loss_gradients(
    model: &Denoiser,
    batch: &TrainBatch,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    stream: &mut RandomStream,
) -> Result<GradientReport> {
    let b = batch.z0.rows();
    if b == 0 || batch.classes.len() != b {
        return Err(LabError::Shape("training batch is empty or misaligned".into()));
    }
    let t: Vec<usize> = (0..b)
        .map(|_| 1 + stream.below(schedule.len() as u64) as usize)
        .collect();
    let eps = Matrix::from_vec(b, DATA_DIM, stream.gaussian(b * DATA_DIM))?;
    let z_t = q_sample(&batch.z0, &t, &eps, schedule)?;
    let n = (b * DATA_DIM) as f64;
    let class_tokens = batch.classes.iter().map(|&c| ConditionToken::Class(c));

    match config.loss_mode {
        LossMode::Standard => {
            let tokens: Vec<ConditionToken> = class_tokens
                .map(|c| dropout_condition(c, config.p_uncond, stream))
                .collect();
            let null_tokens = tokens.iter().filter(|c| **c == ConditionToken::Null).count();
            let (eps_hat, cache) = model.forward(&z_t, &t, &tokens, schedule)?;
            let residual = eps.lincomb(1.0, &eps_hat, -1.0)?;
            let loss = mean_square(&residual);
            let coef = -2.0 / n;
            let (grads, _) = model.backward(&cache, &residual.scale(coef))?;
            Ok(GradientReport {
                loss,
                grads,
                passes: PassCount {
                    forward_rows: b,
                    backward_rows: b,
                },
                null_tokens,
            })
        }
        LossMode::Updated => {
            let w = config.w_train;
            let cond: Vec<ConditionToken> = class_tokens.collect();
            let null = vec![ConditionToken::Null; b];
            let (eps_c, cache_c) = model.forward(&z_t, &t, &cond, schedule)?;
            let (eps_u, cache_u) = model.forward(&z_t, &t, &null, schedule)?;
            let guided = cfg_combine(&eps_c, &eps_u, w)?;
            let residual = eps.lincomb(1.0, &guided, -1.0)?;
            let loss = mean_square(&residual);
            let coef_cond = -(1.0 + w) * 2.0 / n;
            let coef_uncond = w * 2.0 / n;
            let (mut grads, _) = model.backward(&cache_c, &residual.scale(coef_cond))?;
            let (grads_u, _) = model.backward(&cache_u, &residual.scale(coef_uncond))?;
            grads.add_assign(&grads_u);
            Ok(GradientReport {
                loss,
                grads,
                passes: PassCount {
                    forward_rows: 2 * b,
                    backward_rows: 2 * b,
                },
                null_tokens: b,
            })
        }
    }
}

/// One optimisation step: gradients of the configured loss, then Adam.
pub fn train_step(
    model: &mut Denoiser,
    batch: &TrainBatch,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    adam: &mut AdamState,
    stream: &mut RandomStream,
) -> Result<StepOutcome> {
    let report = loss_gradients(model, batch, config, schedule, stream)?;
    if !report.loss.is_finite() {
        return Err(LabError::Numeric(format!("training loss became {}", report.loss)));
    }
    adam_step(model, &report.grads, adam)?;
    Ok(StepOutcome {
        loss: report.loss,
        passes: report.passes,
        null_tokens: report.null_tokens,
    })
}

fn mixture_batch(mixture: &MixtureSpec, n: usize, stream: &mut RandomStream) -> Result<TrainBatch> {
    let set = sample_mixture(mixture, n, stream)?;
    let classes = set.labels.clone().expect("mixture samples are labeled");
    Ok(TrainBatch {
        z0: set.points,
        classes,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub model: Denoiser,
    pub losses: Vec<f64>,
}

/// Train a fresh denoiser on an endless stream of mixture samples.
///
/// The seed fans out to independent streams for initialisation (0), data
/// (1) and diffusion noise/dropout (2).
pub fn train_denoiser(
    model_config: &DenoiserConfig,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    mixture: &MixtureSpec,
) -> Result<TrainedDenoiser> {
    config.validate()?;
    if model_config.num_classes != mixture.num_classes() {
        return Err(LabError::Config(format!(
            "model has {} classes, mixture has {}",
            model_config.num_classes,
            mixture.num_classes()
        )));
    }
    let root = RandomStream::new(config.seed);
    let mut model = Denoiser::init(model_config, &mut root.derive(0))?;
    let mut data = root.derive(1);
    let mut noise = root.derive(2);
    let mut adam = AdamState::new(&model, config.adam)?;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = mixture_batch(mixture, config.batch_size, &mut data)?;
        let out = train_step(&mut model, &batch, config, schedule, &mut adam, &mut noise)
            .map_err(|e| match e {
                LabError::Numeric(m) => LabError::Numeric(format!("step {step}: {m}")),
                other => other,
            })?;
        losses.push(out.loss);
    }
    Ok(TrainedDenoiser { model, losses })
}

/// Mean cross-entropy and its parameter gradient for the noise classifier.
pub fn classifier_gradients(
    classifier: &NoiseClassifier,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    stream: &mut RandomStream,
) -> Result<(f64, NoiseClassifier)> {
    let b = batch.z0.rows();
    if b == 0 || batch.classes.len() != b {
        return Err(LabError::Shape("training batch is empty or misaligned".into()));
    }
    let t: Vec<usize> = (0..b)
        .map(|_| 1 + stream.below(schedule.len() as u64) as usize)
        .collect();
    let eps = Matrix::from_vec(b, DATA_DIM, stream.gaussian(b * DATA_DIM))?;
    let z_t = q_sample(&batch.z0, &t, &eps, schedule)?;
    let (logits, cache) = classifier.forward(&z_t, &t, schedule)?;
    let logp = crate::denoiser::log_softmax(&logits);
    let mut loss = 0.0;
    let mut upstream = Matrix::zeros(b, logits.cols());
    for (i, &c) in batch.classes.iter().enumerate() {
        loss -= logp.get(i, c);
        for (j, u) in upstream.row_mut(i).iter_mut().enumerate() {
            let indicator = if j == c { 1.0 } else { 0.0 };
            *u = (logp.get(i, j).exp() - indicator) / b as f64;
        }
    }
    let (grads, _) = classifier.backward(&cache, &upstream)?;
    Ok((loss / b as f64, grads))
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: NoiseClassifier,
    pub losses: Vec<f64>,
}

/// Cross-entropy training on noised mixture samples at uniform timesteps.
pub fn train_classifier(
    model_config: &DenoiserConfig,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    mixture: &MixtureSpec,
) -> Result<TrainedClassifier> {
    config.validate()?;
    let root = RandomStream::new(config.seed).derive(7);
    let mut model = NoiseClassifier::init(model_config, &mut root.derive(0))?;
    let mut data = root.derive(1);
    let mut noise = root.derive(2);
    let mut adam = AdamState::new(&model, config.adam)?;
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch = mixture_batch(mixture, config.batch_size, &mut data)?;
        let (loss, grads) = classifier_gradients(&model, &batch, schedule, &mut noise)?;
        if !loss.is_finite() {
            return Err(LabError::Numeric(format!("classifier loss became {loss}")));
        }
        adam_step(&mut model, &grads, &mut adam)?;
        losses.push(loss);
    }
    Ok(TrainedClassifier { model, losses })
}
