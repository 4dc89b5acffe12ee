//! The conditional noise predictor `ε_θ(z_t, c)` and the noise-aware
//! classifier `p_φ(c | z_t)` used by classifier guidance.
//!
//! Conditional and unconditional predictions come from one shared network:
//! the class embedding table has `K + 1` rows and row `K` is the learned
//! null token. The network input is the concatenation
//! `[z_t (2) | time embedding | class embedding]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::numerics::{sinusoidal_embed, Activation, Matrix, MlpCache, MlpParams, ParamTensors, RandomStream};
use crate::training::TrainConfig;
use crate::{LabError, Result};

/// Data dimensionality of the toy problems.
pub const DATA_DIM: usize = 2;

/// A class label or the null (unconditional) token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionToken {
    Class(usize),
    Null,
}

impl ConditionToken {
    /// Row of the embedding table this token selects.
    pub fn embed_row(self, num_classes: usize) -> Result<usize> {
        match self {
            ConditionToken::Class(i) if i < num_classes => Ok(i),
            ConditionToken::Class(i) => Err(LabError::Index(format!(
                "class {i} outside 0..{num_classes}"
            ))),
            ConditionToken::Null => Ok(num_classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    pub num_classes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            time_embed_dim: 16,
            class_embed_dim: 8,
            num_classes: 3,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(LabError::Config("need at least one class".into()));
        }
        if self.hidden.contains(&0) || self.class_embed_dim == 0 {
            return Err(LabError::Config(format!("invalid model sizes {self:?}")));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(LabError::Config("time_embed_dim must be even and positive".into()));
        }
        Ok(())
    }

    fn layer_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(output);
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub mlp: MlpParams,
    /// `[(K + 1) × E]`; the last row is the null token.
    pub class_embed: Matrix,
    pub time_embed_dim: usize,
    pub num_classes: usize,
}

/// Forward record for [`Denoiser::backward`].
#[derive(Debug, Clone)]
pub struct DenoiserCache {
    mlp: MlpCache,
    embed_rows: Vec<usize>,
}

/// Time embeddings for every row, computing each distinct `t` once.
fn time_features(t: &[usize], dim: usize, schedule: &NoiseSchedule) -> Result<Vec<Vec<f64>>> {
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; schedule.len() + 1];
    t.iter()
        .map(|&ti| {
            schedule.check_t(ti)?;
            if cache[ti].is_none() {
                cache[ti] = Some(sinusoidal_embed(ti, dim, schedule.len())?);
            }
            Ok(cache[ti].clone().expect("filled"))
        })
        .collect()
}

fn check_rows(z: &Matrix, t: &[usize], n_tokens: Option<usize>) -> Result<()> {
    if z.cols() != DATA_DIM {
        return Err(LabError::Shape(format!("z has {} columns, expected {DATA_DIM}", z.cols())));
    }
    if t.len() != z.rows() || n_tokens.is_some_and(|n| n != z.rows()) {
        return Err(LabError::Shape("z, t and condition rows are not aligned".into()));
    }
    Ok(())
}

impl Denoiser {
    /// He-initialised network, zero biases, `N(0, 1)` class embeddings.
    pub fn init(config: &DenoiserConfig, stream: &mut RandomStream) -> Result<Self> {
        config.validate()?;
        let input = DATA_DIM + config.time_embed_dim + config.class_embed_dim;
        let mlp = MlpParams::init(&config.layer_sizes(input, DATA_DIM), Activation::Silu, stream)?;
        let rows = config.num_classes + 1;
        let class_embed = Matrix::from_vec(
            rows,
            config.class_embed_dim,
            stream.gaussian(rows * config.class_embed_dim),
        )?;
        Ok(Self {
            mlp,
            class_embed,
            time_embed_dim: config.time_embed_dim,
            num_classes: config.num_classes,
        })
    }

    pub fn class_embed_dim(&self) -> usize {
        self.class_embed.cols()
    }

    pub fn config(&self) -> DenoiserConfig {
        DenoiserConfig {
            hidden: self.mlp.layers[..self.mlp.layers.len() - 1]
                .iter()
                .map(|l| l.fan_out())
                .collect(),
            time_embed_dim: self.time_embed_dim,
            class_embed_dim: self.class_embed_dim(),
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        let expect_in = DATA_DIM + self.time_embed_dim + self.class_embed_dim();
        if self.mlp.input_dim() != expect_in || self.mlp.output_dim() != DATA_DIM {
            return Err(LabError::Shape(format!(
                "network maps {} -> {}, expected {expect_in} -> {DATA_DIM}",
                self.mlp.input_dim(),
                self.mlp.output_dim()
            )));
        }
        if self.class_embed.rows() != self.num_classes + 1 {
            return Err(LabError::Shape("class embedding needs K + 1 rows".into()));
        }
        Ok(())
    }

    fn network_input(
        &self,
        z: &Matrix,
        t: &[usize],
        c: &[ConditionToken],
        schedule: &NoiseSchedule,
    ) -> Result<(Matrix, Vec<usize>)> {
        check_rows(z, t, Some(c.len()))?;
        let temb = time_features(t, self.time_embed_dim, schedule)?;
        let rows: Vec<usize> = c
            .iter()
            .map(|tok| tok.embed_row(self.num_classes))
            .collect::<Result<_>>()?;
        let width = self.mlp.input_dim();
        let mut data = Vec::with_capacity(z.rows() * width);
        for i in 0..z.rows() {
            data.extend_from_slice(z.row(i));
            data.extend_from_slice(&temb[i]);
            data.extend_from_slice(self.class_embed.row(rows[i]));
        }
        Ok((Matrix::from_vec(z.rows(), width, data)?, rows))
    }

    /// `ε_θ(z_t, c)` for every row.
    pub fn predict_eps(
        &self,
        z: &Matrix,
        t: &[usize],
        c: &[ConditionToken],
        schedule: &NoiseSchedule,
    ) -> Result<Matrix> {
        let (x, _) = self.network_input(z, t, c, schedule)?;
        self.mlp.predict(&x)
    }

    pub fn forward(
        &self,
        z: &Matrix,
        t: &[usize],
        c: &[ConditionToken],
        schedule: &NoiseSchedule,
    ) -> Result<(Matrix, DenoiserCache)> {
        let (x, embed_rows) = self.network_input(z, t, c, schedule)?;
        let (out, mlp) = self.mlp.forward(&x)?;
        Ok((out, DenoiserCache { mlp, embed_rows }))
    }

    /// Parameter gradient (shaped like `self`) of `Σ ⟨upstream, ε̂⟩`, plus
    /// the gradient with respect to `z_t`.
    pub fn backward(&self, cache: &DenoiserCache, upstream: &Matrix) -> Result<(Denoiser, Matrix)> {
        let (mlp, gx) = self.mlp.backward(&cache.mlp, upstream)?;
        let mut class_embed = Matrix::zeros(self.class_embed.rows(), self.class_embed.cols());
        let offset = DATA_DIM + self.time_embed_dim;
        let e = self.class_embed_dim();
        let mut gz = Matrix::zeros(gx.rows(), DATA_DIM);
        for (i, &r) in cache.embed_rows.iter().enumerate() {
            let src = gx.row(i);
            gz.row_mut(i).copy_from_slice(&src[..DATA_DIM]);
            for (dst, g) in class_embed.row_mut(r).iter_mut().zip(&src[offset..offset + e]) {
                *dst += g;
            }
        }
        Ok((
            Denoiser {
                mlp,
                class_embed,
                time_embed_dim: self.time_embed_dim,
                num_classes: self.num_classes,
            },
            gz,
        ))
    }

    pub fn zeros_like(&self) -> Denoiser {
        Denoiser {
            mlp: self.mlp.zeros_like(),
            class_embed: Matrix::zeros(self.class_embed.rows(), self.class_embed.cols()),
            time_embed_dim: self.time_embed_dim,
            num_classes: self.num_classes,
        }
    }
}

impl ParamTensors for Denoiser {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.mlp.tensors();
        v.push(self.class_embed.as_slice());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.mlp.tensors_mut();
        v.push(self.class_embed.as_mut_slice());
        v
    }
}

/// Noise-conditioned classifier mapping `(z_t, time embedding)` to `K` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseClassifier {
    pub mlp: MlpParams,
    pub time_embed_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    mlp: MlpCache,
}

impl NoiseClassifier {
    pub fn init(config: &DenoiserConfig, stream: &mut RandomStream) -> Result<Self> {
        config.validate()?;
        let sizes = config.layer_sizes(DATA_DIM + config.time_embed_dim, config.num_classes);
        Ok(Self {
            mlp: MlpParams::init(&sizes, Activation::Silu, stream)?,
            time_embed_dim: config.time_embed_dim,
            num_classes: config.num_classes,
        })
    }

    fn network_input(&self, z: &Matrix, t: &[usize], schedule: &NoiseSchedule) -> Result<Matrix> {
        check_rows(z, t, None)?;
        let temb = time_features(t, self.time_embed_dim, schedule)?;
        let width = DATA_DIM + self.time_embed_dim;
        let mut data = Vec::with_capacity(z.rows() * width);
        for i in 0..z.rows() {
            data.extend_from_slice(z.row(i));
            data.extend_from_slice(&temb[i]);
        }
        Matrix::from_vec(z.rows(), width, data)
    }

    pub fn logits(&self, z: &Matrix, t: &[usize], schedule: &NoiseSchedule) -> Result<Matrix> {
        self.mlp.predict(&self.network_input(z, t, schedule)?)
    }

    pub fn forward(&self, z: &Matrix, t: &[usize], schedule: &NoiseSchedule) -> Result<(Matrix, ClassifierCache)> {
        let (out, mlp) = self.mlp.forward(&self.network_input(z, t, schedule)?)?;
        Ok((out, ClassifierCache { mlp }))
    }

    /// Parameter gradient of `Σ ⟨upstream, logits⟩` and the gradient in `z_t`.
    pub fn backward(&self, cache: &ClassifierCache, upstream: &Matrix) -> Result<(NoiseClassifier, Matrix)> {
        let (mlp, gx) = self.mlp.backward(&cache.mlp, upstream)?;
        let gz = Matrix::from_fn(gx.rows(), DATA_DIM, |i, j| gx.get(i, j));
        Ok((
            NoiseClassifier {
                mlp,
                time_embed_dim: self.time_embed_dim,
                num_classes: self.num_classes,
            },
            gz,
        ))
    }

    /// `∇_{z_t} log p_φ(c_i | z_t)` for each row `i`.
    pub fn grad_log_prob(
        &self,
        z: &Matrix,
        t: &[usize],
        classes: &[usize],
        schedule: &NoiseSchedule,
    ) -> Result<Matrix> {
        if classes.len() != z.rows() {
            return Err(LabError::Shape("one class per row required".into()));
        }
        let (logits, cache) = self.forward(z, t, schedule)?;
        let logp = log_softmax(&logits);
        let mut upstream = Matrix::zeros(logits.rows(), logits.cols());
        for (i, &c) in classes.iter().enumerate() {
            if c >= self.num_classes {
                return Err(LabError::Index(format!("class {c} outside 0..{}", self.num_classes)));
            }
            for (j, u) in upstream.row_mut(i).iter_mut().enumerate() {
                let indicator = if j == c { 1.0 } else { 0.0 };
                *u = indicator - logp.get(i, j).exp();
            }
        }
        Ok(self.backward(&cache, &upstream)?.1)
    }
}

impl ParamTensors for NoiseClassifier {
    fn tensors(&self) -> Vec<&[f64]> {
        self.mlp.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.mlp.tensors_mut()
    }
}

/// Row-wise log-softmax, stabilised by the row maximum.
pub fn log_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub const CHECKPOINT_FORMAT: &str = "cfg-lab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter tensor, flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk model document. Field order is fixed: `format`, `version`,
/// `config_digest`, `model`, `train`, `tensors`. Tensors are listed layer
/// by layer (`mlp.{k}.weight` then `mlp.{k}.bias`) followed by
/// `class_embed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_digest: String,
    pub model: DenoiserConfig,
    pub train: Option<TrainConfig>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_denoiser(d: &Denoiser, train: Option<TrainConfig>, config_digest: &str) -> Self {
        let mut tensors = Vec::new();
        for (k, l) in d.mlp.layers.iter().enumerate() {
            tensors.push(TensorRecord {
                name: format!("mlp.{k}.weight"),
                shape: vec![l.weight.rows(), l.weight.cols()],
                data: l.weight.as_slice().to_vec(),
            });
            tensors.push(TensorRecord {
                name: format!("mlp.{k}.bias"),
                shape: vec![l.bias.len()],
                data: l.bias.clone(),
            });
        }
        tensors.push(TensorRecord {
            name: "class_embed".into(),
            shape: vec![d.class_embed.rows(), d.class_embed.cols()],
            data: d.class_embed.as_slice().to_vec(),
        });
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_digest: config_digest.into(),
            model: d.config(),
            train,
            tensors,
        }
    }

    pub fn to_denoiser(&self) -> Result<Denoiser> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(LabError::Parse(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut d = Denoiser::init(&self.model, &mut RandomStream::new(0))?;
        let slots = d.tensors_mut();
        if slots.len() != self.tensors.len() {
            return Err(LabError::Parse("checkpoint tensor count mismatch".into()));
        }
        for (slot, rec) in slots.into_iter().zip(&self.tensors) {
            if slot.len() != rec.data.len() || rec.shape.iter().product::<usize>() != rec.data.len() {
                return Err(LabError::Parse(format!("tensor {} has wrong size", rec.name)));
            }
            slot.copy_from_slice(&rec.data);
        }
        if d.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(LabError::Numeric("checkpoint holds non-finite parameters".into()));
        }
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.partial");
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
