//! Run configuration: one TOML document with flat dotted keys, e.g.
//!
//! ```toml
//! schedule.T = 100
//! train.steps = 20000
//! train.adam.lr = 1e-3
//! eval.w_sample = [0.0, 1.0, 2.0, 4.0, 8.0]
//! out_dir = "runs/toy"
//! ```
//!
//! Every key is optional; omitted keys take the defaults below. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{ConditionToken, DenoiserConfig};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::evaldata::MixtureSpec;
use crate::guidance::GuidanceRule;
use crate::numerics::AdamHyper;
use crate::sampling::{SamplerConfig, SamplerKind};
use crate::training::{LossMode, TrainConfig};
use crate::{LabError, Result};

/// Environment variable that may override the output directory. No other
/// setting is read from the environment.
pub const OUT_DIR_ENV: &str = "CFGLAB_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            hidden: d.hidden,
            time_embed_dim: d.time_embed_dim,
            class_embed_dim: d.class_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Loss for the `train` subcommand; experiments train both modes.
    pub loss_mode: LossMode,
    pub w_train: f64,
    pub p_uncond: f64,
    /// Standard-loss batch size; the updated loss runs half of it since
    /// each example costs two passes.
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamHyper,
    /// Steps for the noise classifier (classifier guidance only).
    pub classifier_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            loss_mode: t.loss_mode,
            w_train: t.w_train,
            p_uncond: t.p_uncond,
            batch_size: t.batch_size,
            steps: t.steps,
            adam: t.adam,
            classifier_steps: 5000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    None,
    Cfg,
    Classifier,
    Rescaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub n_steps: usize,
    pub eta: f64,
    pub guidance: GuidanceMode,
    pub phi: f64,
    /// Scale and class for the `sample` subcommand; experiments sweep them.
    pub w: f64,
    pub class: usize,
    /// Sample with the null token instead of `class`.
    pub unconditional: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            n_steps: 100,
            eta: 0.0,
            guidance: GuidanceMode::Cfg,
            phi: 0.7,
            w: 1.0,
            class: 0,
            unconditional: false,
        }
    }
}

impl SamplerSection {
    pub fn rule(&self, w: f64) -> GuidanceRule {
        match self.guidance {
            GuidanceMode::None => GuidanceRule::NoGuidance,
            GuidanceMode::Cfg => GuidanceRule::Cfg { w },
            GuidanceMode::Classifier => GuidanceRule::ClassifierGrad { w },
            GuidanceMode::Rescaled => GuidanceRule::RescaledCfg { w, phi: self.phi },
        }
    }
}

/// Either a ring of `k` isotropic Gaussians, or explicit components when
/// `means` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSection {
    pub k: usize,
    pub radius: f64,
    pub sigma: f64,
    pub means: Option<Vec<[f64; 2]>>,
    pub covs: Option<Vec<[[f64; 2]; 2]>>,
    pub weights: Option<Vec<f64>>,
}

impl Default for MixtureSection {
    fn default() -> Self {
        Self {
            k: 3,
            radius: 2.0,
            sigma: 0.35,
            means: None,
            covs: None,
            weights: None,
        }
    }
}

impl MixtureSection {
    pub fn build(&self) -> Result<MixtureSpec> {
        let Some(means) = &self.means else {
            return MixtureSpec::ring(self.k, self.radius, self.sigma);
        };
        let k = means.len();
        let covs = match &self.covs {
            Some(c) => c.clone(),
            None => vec![[[self.sigma * self.sigma, 0.0], [0.0, self.sigma * self.sigma]]; k],
        };
        let weights = match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / k as f64; k],
        };
        MixtureSpec::new(means.clone(), covs, weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Energy,
    Sliced,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Energy => "energy",
            MetricKind::Sliced => "sliced",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metric: MetricKind,
    pub n_samples: usize,
    pub n_proj: usize,
    /// Independent oracle pairs averaged into each noise floor. A single
    /// pair is a noisy unit: its value varies several-fold between draws.
    pub floor_pairs: usize,
    pub w_sample: Vec<f64>,
    pub w_train: Vec<f64>,
    pub steps: Vec<usize>,
    /// Guidance scale held fixed in the step sweep.
    pub sweep_w: f64,
    /// Points per class drawn into SVG panels and their CSVs.
    pub plot_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metric: MetricKind::Energy,
            n_samples: 10_000,
            n_proj: 128,
            floor_pairs: 4,
            w_sample: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            w_train: vec![0.5, 1.0, 2.0],
            steps: vec![5, 10, 20, 50, 100],
            sweep_w: 1.8,
            plot_points: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// First experiment seed; `n_seeds` consecutive seeds are run.
    pub seed: u64,
    pub n_seeds: usize,
    /// Threads for grid cells and metrics. Results do not depend on it.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seeds: 5,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub mixture: MixtureSection,
    pub eval: EvalSection,
    pub run: RunSection,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            mixture: MixtureSection::default(),
            eval: EvalSection::default(),
            run: RunSection::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Offsets that fan one experiment seed out into independent roles.
pub const TRAIN_SEED_OFFSET: u64 = 0;
pub const SAMPLE_SEED_OFFSET: u64 = 1 << 32;
pub const ORACLE_SEED_OFFSET: u64 = 2 << 32;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Output directory, unless overridden by [`OUT_DIR_ENV`].
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule()?;
        self.denoiser_config()?.validate()?;
        self.mixture.build()?;
        self.train_config(LossMode::Standard, self.train.w_train, 0)?.validate()?;
        if self.train.batch_size < 2 {
            return Err(LabError::Config("train.batch_size must be at least 2".into()));
        }
        for &w in self.eval.w_sample.iter().chain(&self.eval.w_train).chain([&self.eval.sweep_w]) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LabError::Config(format!("guidance scales must be >= 0, got {w}")));
            }
        }
        for &n in &self.eval.steps {
            if n == 0 || n > schedule.len() {
                return Err(LabError::Config(format!(
                    "eval.steps entries must lie in 1..={}, got {n}",
                    schedule.len()
                )));
            }
        }
        if self.eval.n_samples == 0 || self.eval.n_proj == 0 || self.eval.floor_pairs == 0 {
            return Err(LabError::Config(
                "eval.n_samples, eval.n_proj and eval.floor_pairs must be positive".into(),
            ));
        }
        if self.run.n_seeds == 0 || self.run.workers == 0 {
            return Err(LabError::Config("run.n_seeds and run.workers must be positive".into()));
        }
        self.sampler_config(self.sampler.w, self.condition(), 0)?.validate(&schedule)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn mixture(&self) -> Result<MixtureSpec> {
        self.mixture.build()
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        Ok(DenoiserConfig {
            hidden: self.model.hidden.clone(),
            time_embed_dim: self.model.time_embed_dim,
            class_embed_dim: self.model.class_embed_dim,
            num_classes: self.mixture.build()?.num_classes(),
        })
    }

    /// Training settings for one model. The updated loss gets half the
    /// batch so both modes spend the same network passes per step.
    pub fn train_config(&self, mode: LossMode, w_train: f64, seed: u64) -> Result<TrainConfig> {
        let batch_size = match mode {
            LossMode::Standard => self.train.batch_size,
            LossMode::Updated => (self.train.batch_size / 2).max(1),
        };
        Ok(TrainConfig {
            loss_mode: mode,
            w_train,
            p_uncond: self.train.p_uncond,
            batch_size,
            steps: self.train.steps,
            adam: self.train.adam,
            seed: seed.wrapping_add(TRAIN_SEED_OFFSET),
        })
    }

    pub fn condition(&self) -> ConditionToken {
        if self.sampler.unconditional {
            ConditionToken::Null
        } else {
            ConditionToken::Class(self.sampler.class)
        }
    }

    pub fn sampler_config(&self, w: f64, condition: ConditionToken, seed: u64) -> Result<SamplerConfig> {
        let guidance = match condition {
            ConditionToken::Null => GuidanceRule::NoGuidance,
            ConditionToken::Class(_) => self.sampler.rule(w),
        };
        Ok(SamplerConfig {
            kind: self.sampler.kind,
            n_steps: self.sampler.n_steps,
            eta: self.sampler.eta,
            guidance,
            n_samples: self.eval.n_samples,
            condition,
            seed: seed.wrapping_add(SAMPLE_SEED_OFFSET),
        })
    }

    pub fn oracle_seed(&self, seed: u64) -> u64 {
        seed.wrapping_add(ORACLE_SEED_OFFSET)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.run.n_seeds as u64).map(|i| self.run.seed + i).collect()
    }

    /// Content hash of everything that affects results (the output
    /// directory and worker count are excluded).
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.run.workers = 1;
        sha256_json(&canonical)
    }
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn sha256_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize");
    let hash = Sha256::digest(&json);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}
