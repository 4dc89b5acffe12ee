use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::RandomStream;
use crate::{LabError, Result};

/// Nonlinearity applied between layers (never after the last one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Identity,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One affine layer, `y = x·Wᵀ + b` with `W` shaped `[out × in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Per-layer record kept by [`MlpParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input seen by each layer.
    inputs: Vec<Matrix>,
    /// `act'(pre)` for every hidden layer output.
    act_grads: Vec<Matrix>,
}

impl MlpParams {
    /// He-initialised network: weights `N(0, 2/fan_in)`, zero biases.
    pub fn init(sizes: &[usize], activation: Activation, stream: &mut RandomStream) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(LabError::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = stream
                    .gaussian(fan_in * fan_out)
                    .into_iter()
                    .map(|g| g * std)
                    .collect();
                Linear {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.fan_in(), l.fan_out()))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(LabError::Config("network has no layers".into()));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(LabError::Shape(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].fan_out(),
                    k + 1,
                    pair[1].fan_in()
                )));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.fan_out() {
                return Err(LabError::Shape("bias length mismatch".into()));
            }
        }
        Ok(())
    }

    fn affine(layer: &Linear, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_nt(&layer.weight)?;
        let n = layer.bias.len();
        for row in out.as_mut_slice().chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut h = Self::affine(&self.layers[0], input)?;
        for layer in &self.layers[1..] {
            self.apply_activation(&mut h);
            h = Self::affine(layer, &h)?;
        }
        Ok(h)
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if self.layers.is_empty() {
            return Err(LabError::Config("network has no layers".into()));
        }
        if input.cols() != self.input_dim() {
            return Err(LabError::Shape(format!(
                "input has {} columns, network expects {}",
                input.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn apply_activation(&self, h: &mut Matrix) {
        if self.activation == Activation::Silu {
            for v in h.as_mut_slice() {
                *v *= sigmoid(*v);
            }
        }
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, MlpCache)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut act_grads = Vec::with_capacity(self.layers.len() - 1);
        let mut h = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut pre = Self::affine(layer, &h)?;
            inputs.push(h);
            if k + 1 == self.layers.len() {
                return Ok((pre, MlpCache { inputs, act_grads }));
            }
            let mut d = Matrix::zeros(pre.rows(), pre.cols());
            match self.activation {
                Activation::Silu => {
                    for (v, g) in pre.as_mut_slice().iter_mut().zip(d.as_mut_slice()) {
                        let s = sigmoid(*v);
                        *g = s * (1.0 + *v * (1.0 - s));
                        *v *= s;
                    }
                }
                Activation::Identity => d.as_mut_slice().fill(1.0),
            }
            act_grads.push(d);
            h = pre;
        }
        unreachable!("loop returns at the last layer")
    }

    /// Gradients of `Σ ⟨upstream, output⟩` with respect to the parameters
    /// and the input. The returned parameter gradient has the network's shape.
    pub fn backward(&self, cache: &MlpCache, upstream: &Matrix) -> Result<(MlpParams, Matrix)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(LabError::Shape("cache does not belong to this network".into()));
        }
        let batch = cache.inputs[0].rows();
        if upstream.shape() != (batch, self.output_dim()) {
            return Err(LabError::Shape(format!(
                "upstream gradient {:?}, expected {:?}",
                upstream.shape(),
                (batch, self.output_dim())
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let weight = g.matmul_tn(&cache.inputs[k])?;
            let bias = g.column_sums();
            let mut g_in = g.matmul(&layer.weight)?;
            if k > 0 {
                for (v, d) in g_in
                    .as_mut_slice()
                    .iter_mut()
                    .zip(cache.act_grads[k - 1].as_slice())
                {
                    *v *= d;
                }
            }
            grads.push(Linear { weight, bias });
            g = g_in;
        }
        grads.reverse();
        Ok((
            MlpParams {
                layers: grads,
                activation: self.activation,
            },
            g,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }
}

impl super::ParamTensors for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}
