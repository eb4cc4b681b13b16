//! Batch normalization over the channel axis of `[N, C, ...]` tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds one batch's statistics into the running estimates. `var` is the
    /// biased batch variance over `count` elements; the running estimate uses
    /// the unbiased one.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = ((1.0 - m) * *r + m * b * unbias).max(0.0);
        }
    }
}

pub(crate) fn layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[1] != channels {
        return Err(Error::shape("batchnorm", s, &[0, channels]));
    }
    Ok((s[0], s[2..].iter().product()))
}

/// Saved activations needed by the backward rule.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes with batch statistics. Returns the output, saved values, and
/// the batch mean and biased variance per channel.
pub fn batchnorm_train_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    epsilon: f64,
) -> Result<(Tensor, BnSaved, Vec<f64>, Vec<f64>)> {
    let c = gamma.len();
    let (n, inner) = layout(x, c)?;
    if beta.len() != c {
        return Err(Error::shape("batchnorm beta", beta.shape(), gamma.shape()));
    }
    let count = (n * inner) as f64;
    let src = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            for &v in &src[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                s += v;
            }
        }
        mean[ch] = s / count;
        let mut q = 0.0;
        for b in 0..n {
            for &v in &src[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                q += (v - mean[ch]) * (v - mean[ch]);
            }
        }
        var[ch] = q / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let (y, xhat) = normalize(src, n, c, inner, &mean, &inv_std, gamma.data(), beta.data());
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        BnSaved { xhat, inv_std },
        mean,
        var,
    ))
}

/// Per-channel affine map using running statistics.
pub fn batchnorm_eval_forward(x: &Tensor, state: &BatchNormState) -> Result<(Tensor, BnSaved)> {
    batchnorm_affine_forward(
        x,
        state.gamma.data(),
        state.beta.data(),
        state.running_mean.data(),
        state.running_var.data(),
        state.epsilon,
    )
}

/// Normalizes with fixed statistics `mean`, `var`.
pub fn batchnorm_affine_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    epsilon: f64,
) -> Result<(Tensor, BnSaved)> {
    let c = gamma.len();
    let (n, inner) = layout(x, c)?;
    if beta.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::invalid("batchnorm", "per-channel parameter lengths differ"));
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let (y, xhat) = normalize(x.data(), n, c, inner, mean, &inv_std, gamma, beta);
    Ok((Tensor::from_parts(x.shape().to_vec(), y), BnSaved { xhat, inv_std }))
}

#[allow(clippy::too_many_arguments)]
fn normalize(
    src: &[f64],
    n: usize,
    c: usize,
    inner: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; src.len()];
    let mut xhat = vec![0.0; src.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                let h = (src[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Gradients `(dx, dgamma, dbeta)`. `batch_stats` selects the train-mode rule,
/// where the mean and variance depend on `x`.
pub fn batchnorm_backward(
    saved: &BnSaved,
    gamma: &[f64],
    shape: &[usize],
    grad_out: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = gamma.len();
    let n = shape[0];
    let inner: usize = shape[2..].iter().product();
    let count = (n * inner) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for (g, xh) in grad_out[off..off + inner].iter().zip(&saved.xhat[off..off + inner]) {
                dbeta[ch] += g;
                dgamma[ch] += g * xh;
            }
        }
    }
    let mut dx = vec![0.0; grad_out.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * saved.inv_std[ch];
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                dx[i] = if batch_stats {
                    scale * (grad_out[i] - dbeta[ch] / count - saved.xhat[i] * dgamma[ch] / count)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
