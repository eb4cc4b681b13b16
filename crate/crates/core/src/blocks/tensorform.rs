use crate::error::{Error, Result};
use crate::nn::{conv2d, ConvSpec, PaddingMode};
use crate::tensor::Tensor;

/// Largest channel count accepted by the full-tensor variants, whose cost
/// grows as `n^3`.
pub const MAX_TENSOR_CHANNELS: usize = 16;

/// `[2, 1, 3, 3]` bank holding the central differences `d/dx` (along
/// columns) and `d/dy` (along rows) for grid spacing `h`.
pub fn central_difference_kernels(h: f64) -> Tensor {
    let c = 1.0 / (2.0 * h);
    #[rustfmt::skip]
    let data = vec![
        0.0, 0.0, 0.0,
        -c, 0.0, c,
        0.0, 0.0, 0.0,

        0.0, -c, 0.0,
        0.0, 0.0, 0.0,
        0.0, c, 0.0,
    ];
    Tensor::from_parts(vec![2, 1, 3, 3], data)
}

/// One Euler step of the full tensor system
/// `u_i + tau * sum_jk (a_ijk u_k D_x u_j + b_ijk u_k D_y u_j)` on
/// `u: [N, n, H, W]`, with central differences.
pub fn tensorform_forward(
    u: &Tensor,
    a: &Tensor,
    b: &Tensor,
    tau: f64,
    h: f64,
    padding: PaddingMode,
) -> Result<Tensor> {
    let s = u.shape();
    if s.len() != 4 {
        return Err(Error::shape("tensorform_forward", s, &[0, 0, 0, 0]));
    }
    let n = s[1];
    if n > MAX_TENSOR_CHANNELS {
        return Err(Error::invalid(
            "tensorform_forward",
            format!("{n} channels exceeds the limit of {MAX_TENSOR_CHANNELS}"),
        ));
    }
    for t in [a, b] {
        if t.shape() != [n, n, n] {
            return Err(Error::shape("tensorform_forward", t.shape(), &[n, n, n]));
        }
    }
    let spec = ConvSpec::depthwise(n, 2, 3, 1, true).with_padding(padding);
    let d = conv2d(u, &central_difference_kernels(h), &spec)?;
    let (batch, plane) = (s[0], s[2] * s[3]);
    let mut out = u.data().to_vec();
    for bi in 0..batch {
        let uat = |c: usize, p: usize| u.data()[(bi * n + c) * plane + p];
        let dat = |c: usize, dir: usize, p: usize| d.data()[((bi * n + c) * 2 + dir) * plane + p];
        for i in 0..n {
            for p in 0..plane {
                let mut acc = 0.0;
                for j in 0..n {
                    let (dx, dy) = (dat(j, 0, p), dat(j, 1, p));
                    for k in 0..n {
                        acc += a.at3(i, j, k) * uat(k, p) * dx + b.at3(i, j, k) * uat(k, p) * dy;
                    }
                }
                out[(bi * n + i) * plane + p] += tau * acc;
            }
        }
    }
    Ok(Tensor::from_parts(s.to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_tensors_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = Tensor::randn(&[1, 3, 5, 5], 1.0, &mut rng);
        let z = Tensor::zeros(&[3, 3, 3]);
        assert_eq!(tensorform_forward(&u, &z, &z, 0.1, 1.0, PaddingMode::ZeroDirichlet).unwrap(), u);
    }

    #[test]
    fn central_difference_of_linear_ramp() {
        let u = Tensor::from_fn(&[1, 1, 4, 5], |i| 2.0 * (i % 5) as f64 - 3.0 * (i / 5) as f64);
        let spec = ConvSpec::depthwise(1, 2, 3, 1, true);
        let d = conv2d(&u, &central_difference_kernels(0.5), &spec).unwrap();
        // Interior points see the exact slopes, scaled by 1/h.
        assert!((d.at4(0, 0, 1, 2) - 4.0).abs() < 1e-14);
        assert!((d.at4(0, 1, 1, 2) + 6.0).abs() < 1e-14);
    }

    #[test]
    fn too_many_channels_rejected() {
        let u = Tensor::zeros(&[1, 17, 3, 3]);
        let z = Tensor::zeros(&[17, 17, 17]);
        assert!(tensorform_forward(&u, &z, &z, 0.1, 1.0, PaddingMode::ZeroDirichlet).is_err());
    }
}
