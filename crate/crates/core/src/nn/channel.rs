//! Parameter-free channel plumbing on `[N, C, H, W]` tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, s, &[0, 0, 0, 0]));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

/// `out[:, j * cb + k] = a[:, j] * b[:, k]`.
pub fn channel_outer_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, plane) = dims(a, "channel_outer")?;
    let (nb, cb, planeb) = dims(b, "channel_outer")?;
    if n != nb || plane != planeb || a.shape()[2..] != b.shape()[2..] {
        return Err(Error::shape("channel_outer", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; n * ca * cb * plane];
    for s in 0..n {
        for j in 0..ca {
            let pa = &a.data()[(s * ca + j) * plane..(s * ca + j + 1) * plane];
            for k in 0..cb {
                let pb = &b.data()[(s * cb + k) * plane..(s * cb + k + 1) * plane];
                let o = &mut out[((s * ca + j) * cb + k) * plane..((s * ca + j) * cb + k + 1) * plane];
                for ((o, &x), &y) in o.iter_mut().zip(pa).zip(pb) {
                    *o = x * y;
                }
            }
        }
    }
    let sh = a.shape();
    Ok(Tensor::from_parts(vec![n, ca * cb, sh[2], sh[3]], out))
}

pub fn channel_outer_backward(a: &Tensor, b: &Tensor, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, ca, plane) = (a.shape()[0], a.shape()[1], a.shape()[2] * a.shape()[3]);
    let cb = b.shape()[1];
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for s in 0..n {
        for j in 0..ca {
            for k in 0..cb {
                let go = &grad_out[((s * ca + j) * cb + k) * plane..((s * ca + j) * cb + k + 1) * plane];
                let ia = (s * ca + j) * plane;
                let ib = (s * cb + k) * plane;
                for p in 0..plane {
                    ga[ia + p] += go[p] * b.data()[ib + p];
                    gb[ib + p] += go[p] * a.data()[ia + p];
                }
            }
        }
    }
    (ga, gb)
}

/// `out[:, c] = x[:, index[c]]`; indices may repeat.
pub fn channel_gather_forward(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (n, c, plane) = dims(x, "channel_gather")?;
    if let Some(&bad) = index.iter().find(|&&i| i >= c) {
        return Err(Error::invalid("channel_gather", format!("index {bad} out of range for {c} channels")));
    }
    let co = index.len();
    let mut out = Vec::with_capacity(n * co * plane);
    for s in 0..n {
        for &i in index {
            out.extend_from_slice(&x.data()[(s * c + i) * plane..(s * c + i + 1) * plane]);
        }
    }
    Ok(Tensor::from_parts(vec![n, co, x.shape()[2], x.shape()[3]], out))
}

pub fn channel_gather_backward(shape: &[usize], index: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let co = index.len();
    let mut g = vec![0.0; n * c * plane];
    for s in 0..n {
        for (o, &i) in index.iter().enumerate() {
            let src = &grad_out[(s * co + o) * plane..(s * co + o + 1) * plane];
            for (d, v) in g[(s * c + i) * plane..(s * c + i + 1) * plane].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    g
}

/// Sums consecutive runs of `group` channels: `out[:, o] = sum_g x[:, o*group + g]`.
pub fn group_sum_forward(x: &Tensor, group: usize) -> Result<Tensor> {
    let (n, c, plane) = dims(x, "group_sum")?;
    if group == 0 || c % group != 0 {
        return Err(Error::invalid("group_sum", format!("{c} channels not divisible into groups of {group}")));
    }
    let co = c / group;
    let mut out = vec![0.0; n * co * plane];
    for s in 0..n {
        for o in 0..co {
            let dst = &mut out[(s * co + o) * plane..(s * co + o + 1) * plane];
            for g in 0..group {
                let ci = o * group + g;
                for (d, v) in dst.iter_mut().zip(&x.data()[(s * c + ci) * plane..(s * c + ci + 1) * plane]) {
                    *d += v;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, co, x.shape()[2], x.shape()[3]], out))
}

pub fn group_sum_backward(shape: &[usize], group: usize, grad_out: &[f64]) -> Vec<f64> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let co = c / group;
    let mut g = vec![0.0; n * c * plane];
    for s in 0..n {
        for ci in 0..c {
            let o = ci / group;
            g[(s * c + ci) * plane..(s * c + ci + 1) * plane]
                .copy_from_slice(&grad_out[(s * co + o) * plane..(s * co + o + 1) * plane]);
        }
    }
    g
}

/// Keeps every `stride`-th pixel starting at the origin, matching the sample
/// grid of a strided "same" convolution.
pub fn subsample_forward(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, c, _) = dims(x, "subsample")?;
    if stride == 0 {
        return Err(Error::invalid("subsample", "stride must be positive"));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                out.push(x.data()[p * h * w + y * stride * w + xx * stride]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn subsample_backward(shape: &[usize], stride: usize, grad_out: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut g = vec![0.0; nc * h * w];
    for p in 0..nc {
        for y in 0..oh {
            for xx in 0..ow {
                g[p * h * w + y * stride * w + xx * stride] = grad_out[(p * oh + y) * ow + xx];
            }
        }
    }
    g
}
