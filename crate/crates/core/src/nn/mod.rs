//! Layer primitives as plain tensor functions. The differentiable versions
//! live on [`crate::autodiff::Graph`] and share these kernels.

pub mod activation;
pub mod batchnorm;
pub mod channel;
pub mod conv;
pub mod head;

pub use activation::{Activation, ActivationKind};
pub use batchnorm::{BatchNormState, Mode, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use conv::{ConvSpec, PaddingMode};

use crate::error::Result;
use crate::tensor::Tensor;

pub fn conv2d(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv::conv2d_forward(input, weights, spec)
}

pub fn apply_activation(x: &Tensor, act: &Activation) -> Tensor {
    activation::activation_forward(x, act)
}

/// Train mode normalizes with batch statistics and folds them into the
/// running estimates; eval mode uses the running estimates.
pub fn batchnorm(x: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<Tensor> {
    match mode {
        Mode::Train => {
            let (y, _, mean, var) = batchnorm::batchnorm_train_forward(x, &state.gamma, &state.beta, state.epsilon)?;
            let (n, inner) = batchnorm::layout(x, state.channels())?;
            state.update_running(&mean, &var, n * inner);
            Ok(y)
        }
        Mode::Eval => Ok(batchnorm::batchnorm_eval_forward(x, state)?.0),
    }
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    head::global_avg_pool_forward(x)
}

pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    head::linear_forward(x, w, b)
}

pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(head::softmax_cross_entropy_forward(logits, labels)?.0)
}
