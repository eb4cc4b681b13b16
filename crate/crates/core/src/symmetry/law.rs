use super::ChannelTransform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coefficient tensor in new coordinates:
/// `A~_irm = sum_jkl T_ij A_jkl Tinv_lm Tinv_kr`.
///
/// With `u~ = T u`, the system `sum A~_irm u~_m D u~_r` equals `T` applied to
/// `sum A_ijk u_k D u_j`.
pub fn transform_tensor_form(a: &Tensor, t: &ChannelTransform) -> Result<Tensor> {
    transform_tensor_io(a, t, t)
}

/// Tensor law for a coefficient tensor `[n_out, n_in, n_in]` whose output
/// stream transforms by `t_out` and input stream by `t_in`.
pub fn transform_tensor_io(a: &Tensor, t_out: &ChannelTransform, t_in: &ChannelTransform) -> Result<Tensor> {
    let (no, ni) = (t_out.dim(), t_in.dim());
    if a.shape() != [no, ni, ni] {
        return Err(Error::shape("transform_tensor_form", a.shape(), &[no, ni, ni]));
    }
    if t_out.is_identity() && t_in.is_identity() {
        return Ok(a.clone());
    }
    let to = t_out.matrix();
    let ti = t_in.inverse_matrix();
    let ad = a.data();
    let idx = |i: usize, j: usize, k: usize| (i * ni + j) * ni + k;
    // X_ikl = sum_j To_ij A_jkl
    let mut x = vec![0.0; no * ni * ni];
    for i in 0..no {
        for j in 0..no {
            let t = to.at2(i, j);
            for kl in 0..ni * ni {
                x[i * ni * ni + kl] += t * ad[j * ni * ni + kl];
            }
        }
    }
    // Y_irl = sum_k X_ikl Ti_kr
    let mut y = vec![0.0; no * ni * ni];
    for i in 0..no {
        for k in 0..ni {
            for r in 0..ni {
                let t = ti.at2(k, r);
                for l in 0..ni {
                    y[idx(i, r, l)] += x[idx(i, k, l)] * t;
                }
            }
        }
    }
    // Z_irm = sum_l Y_irl Ti_lm
    let mut z = vec![0.0; no * ni * ni];
    for i in 0..no {
        for r in 0..ni {
            for l in 0..ni {
                let v = y[idx(i, r, l)];
                for m in 0..ni {
                    z[idx(i, r, m)] += v * ti.at2(l, m);
                }
            }
        }
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), z))
}

fn jk_combine(a: &Tensor, sign: f64) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape("symmetrize_jk", s, &[s.first().copied().unwrap_or(0), 0, 0]));
    }
    let n = s[1];
    let d = a.data();
    Ok(Tensor::from_fn(s, |t| {
        let (i, j, k) = (t / (n * n), (t / n) % n, t % n);
        0.5 * (d[(i * n + j) * n + k] + sign * d[(i * n + k) * n + j])
    }))
}

/// `(A_ijk + A_ikj) / 2`.
pub fn symmetrize_jk(a: &Tensor) -> Result<Tensor> {
    jk_combine(a, 1.0)
}

/// `(A_ijk - A_ikj) / 2`, the part invisible to conservation-form wiring.
pub fn antisymmetric_jk(a: &Tensor) -> Result<Tensor> {
    jk_combine(a, -1.0)
}
