//! Dense tensors, reverse-mode autodiff and the two optimizers used by the
//! search (SGD with momentum for operator weights, Adam for architecture
//! logits).

pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{shuffle_channels, softmax_slice, BnMode, Gradients, Graph, Var, BN_EPS, BN_MOMENTUM};
pub use optim::{cosine_lr, step_lr, AdamState, SgdMomentum};
pub use params::{BnStats, BufferId, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

use rand::Rng;

/// He-normal initialization for a convolution weight `[O, C/g, K, K]`.
pub fn he_normal<S: crate::Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}
