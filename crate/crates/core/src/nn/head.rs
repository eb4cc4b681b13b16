//! Classification head: pooling, affine layer, cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("global_avg_pool", s, &[0, 0, 0, 0]));
    }
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let out = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward(shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let plane = shape[2] * shape[3];
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / plane as f64, plane))
        .collect()
}

/// `x [N,F] * W^T + b` with `W [out,F]`, `b [out]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::shape("linear", xs, ws));
    }
    if b.shape() != [ws[0]] {
        return Err(Error::shape("linear bias", b.shape(), &[ws[0]]));
    }
    let (n, f, o) = (xs[0], xs[1], ws[0]);
    let mut out = vec![0.0; n * o];
    for i in 0..n {
        for j in 0..o {
            let mut acc = 0.0;
            for k in 0..f {
                acc += x.data()[i * f + k] * w.data()[j * f + k];
            }
            out[i * o + j] = acc + b.data()[j];
        }
    }
    Ok(Tensor::from_parts(vec![n, o], out))
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, f, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut dx = vec![0.0; n * f];
    let mut dw = vec![0.0; o * f];
    let mut db = vec![0.0; o];
    for i in 0..n {
        for j in 0..o {
            let g = grad_out[i * o + j];
            db[j] += g;
            for k in 0..f {
                dx[i * f + k] += g * w.data()[j * f + k];
                dw[j * f + k] += g * x.data()[i * f + k];
            }
        }
    }
    (dx, dw, db)
}

/// Mean softmax cross-entropy over the batch, with max-subtraction. Returns
/// the loss and the softmax probabilities.
pub fn softmax_cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("softmax_cross_entropy", s, &[labels.len(), 0]));
    }
    let (n, k) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        for j in 0..k {
            probs[i * k + j] = (row[j] - m).exp() / z;
        }
        loss += z.ln() + m - row[labels[i]];
    }
    Ok((loss / n as f64, probs))
}

pub fn softmax_cross_entropy_backward(probs: &[f64], labels: &[usize], grad_out: f64) -> Vec<f64> {
    let n = labels.len();
    let k = probs.len() / n;
    let mut g = probs.to_vec();
    for (i, &l) in labels.iter().enumerate() {
        g[i * k + l] -= 1.0;
    }
    let scale = grad_out / n as f64;
    g.iter_mut().for_each(|v| *v *= scale);
    g
}
