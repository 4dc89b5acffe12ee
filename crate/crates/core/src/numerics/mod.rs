//! Dense-network numerics: matrices, MLPs with exact gradients, Adam,
//! timestep embeddings and the counter-based random stream.

mod adam;
mod embed;
mod gradcheck;
mod matrix;
mod mlp;
mod rng;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use embed::sinusoidal_embed;
pub use gradcheck::{check_gradient, GradCheck};
pub use matrix::Matrix;
pub use mlp::{Activation, Linear, MlpCache, MlpParams};
pub use rng::{philox4x32_10, RandomStream};

/// A parameter set viewed as an ordered list of flat tensors.
///
/// Gradients use the same type as the parameters they belong to, so the
/// i-th tensor of a gradient lines up with the i-th tensor of the model.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// All entries concatenated in tensor order.
    fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flatten().copied().collect()
    }
}
