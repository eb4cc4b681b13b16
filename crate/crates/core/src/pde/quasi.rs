use super::{central_diff, PdeGrid};
use crate::blocks::BlockVariant;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coefficients of a quasi-linear system.
#[derive(Debug, Clone, PartialEq)]
pub enum QuasiWeights {
    /// `n x n` matrices `A, B` (derivative mixing) and `C, D` (state mixing
    /// for the x and y terms).
    Factored { a: Tensor, b: Tensor, c: Tensor, d: Tensor },
    /// `n x n x n` tensors indexed `[i, j, k]`.
    Tensor { a: Tensor, b: Tensor },
}

impl QuasiWeights {
    fn check(&self, n: usize, variant: BlockVariant) -> Result<()> {
        match self {
            QuasiWeights::Factored { a, b, c, d } => {
                if variant.is_tensor() {
                    return Err(Error::invalid("quasilinear_step", format!("{} needs tensor weights", variant.name())));
                }
                let named = [("quasilinear_step A", a), ("quasilinear_step B", b), ("quasilinear_step C", c), ("quasilinear_step D", d)];
                for (op, m) in named {
                    if m.shape() != [n, n] {
                        return Err(Error::shape(op, m.shape(), &[n, n]));
                    }
                }
            }
            QuasiWeights::Tensor { a, b } => {
                if !variant.is_tensor() {
                    return Err(Error::invalid("quasilinear_step", format!("{} needs factored weights", variant.name())));
                }
                for m in [a, b] {
                    if m.shape() != [n, n, n] {
                        return Err(Error::shape("quasilinear_step tensor", m.shape(), &[n, n, n]));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `u + tau * rhs(u)` for the selected wiring, with central differences.
///
/// Right-hand sides, with `Cu = sum_k C_jk u_k` and `Dx`, `Dy` central differences:
/// - Eq3: `sum_j A_ij (Cu)_j Dx u_j + B_ij (Du)_j Dy u_j`
/// - Eq4: `(Cu)_i sum_j A_ij Dx u_j + (Du)_i sum_j B_ij Dy u_j`
/// - Eq5: `(Cu)_i Dx u_i + (Du)_i Dy u_i` (A and B unused)
/// - Eq6: `sum_j A_ij Dx(u_j (Cu)_j) + B_ij Dy(u_j (Cu)_j)` (D unused)
/// - Eq7: `sum_j A_ij Dx(u_j (Cu)_j) + B_ij Dy(u_j (Du)_j)`
/// - TensorForm: `sum_jk A_ijk u_k Dx u_j + B_ijk u_k Dy u_j`
/// - Conservation: `sum_jk A_ijk Dx(u_j u_k) + B_ijk Dy(u_j u_k)`
pub fn quasilinear_step(g: &PdeGrid, w: &QuasiWeights, variant: BlockVariant) -> Result<PdeGrid> {
    let n = g.channels();
    w.check(n, variant)?;
    let (hh, ww) = (g.height(), g.width());
    let plane = hh * ww;
    let u = g.u.data();
    let comp = |j: usize| &u[j * plane..(j + 1) * plane];
    let diff = |p: &[f64]| central_diff(p, hh, ww, g.h, g.bc);
    let mut rhs = vec![0.0; n * plane];

    match w {
        QuasiWeights::Factored { a, b, c, d } => {
            let mix = |m: &Tensor| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|j| (0..plane).map(|p| (0..n).map(|k| m.at2(j, k) * u[k * plane + p]).sum()).collect())
                    .collect()
            };
            let cu = mix(c);
            let du = mix(d);
            match variant {
                BlockVariant::Eq3 | BlockVariant::Eq4 | BlockVariant::Eq5 => {
                    let grads: Vec<_> = (0..n).map(|j| diff(comp(j))).collect();
                    for i in 0..n {
                        for p in 0..plane {
                            rhs[i * plane + p] = match variant {
                                BlockVariant::Eq3 => (0..n)
                                    .map(|j| a.at2(i, j) * cu[j][p] * grads[j].0[p] + b.at2(i, j) * du[j][p] * grads[j].1[p])
                                    .sum(),
                                BlockVariant::Eq4 => {
                                    let sx: f64 = (0..n).map(|j| a.at2(i, j) * grads[j].0[p]).sum();
                                    let sy: f64 = (0..n).map(|j| b.at2(i, j) * grads[j].1[p]).sum();
                                    cu[i][p] * sx + du[i][p] * sy
                                }
                                _ => cu[i][p] * grads[i].0[p] + du[i][p] * grads[i].1[p],
                            };
                        }
                    }
                }
                BlockVariant::Eq6 | BlockVariant::Eq7 => {
                    let ymix = if variant == BlockVariant::Eq6 { &cu } else { &du };
                    let flux = |m: &Vec<Vec<f64>>, j: usize| -> Vec<f64> {
                        comp(j).iter().zip(&m[j]).map(|(uj, mj)| uj * mj).collect()
                    };
                    let gx: Vec<Vec<f64>> = (0..n).map(|j| diff(&flux(&cu, j)).0).collect();
                    let gy: Vec<Vec<f64>> = (0..n).map(|j| diff(&flux(ymix, j)).1).collect();
                    for i in 0..n {
                        for p in 0..plane {
                            rhs[i * plane + p] = (0..n).map(|j| a.at2(i, j) * gx[j][p] + b.at2(i, j) * gy[j][p]).sum();
                        }
                    }
                }
                BlockVariant::TensorForm | BlockVariant::Conservation => unreachable!("checked above"),
            }
        }
        QuasiWeights::Tensor { a, b } => {
            let (ad, bd) = (a.data(), b.data());
            if variant == BlockVariant::TensorForm {
                let grads: Vec<_> = (0..n).map(|j| diff(comp(j))).collect();
                for i in 0..n {
                    for p in 0..plane {
                        let mut s = 0.0;
                        for (j, (gx, gy)) in grads.iter().enumerate() {
                            for k in 0..n {
                                let t = (i * n + j) * n + k;
                                let uk = u[k * plane + p];
                                s += ad[t] * uk * gx[p] + bd[t] * uk * gy[p];
                            }
                        }
                        rhs[i * plane + p] = s;
                    }
                }
            } else {
                let mut grads = Vec::with_capacity(n * n);
                for j in 0..n {
                    for k in 0..n {
                        let q: Vec<f64> = comp(j).iter().zip(comp(k)).map(|(x, y)| x * y).collect();
                        grads.push(diff(&q));
                    }
                }
                for i in 0..n {
                    for p in 0..plane {
                        let mut s = 0.0;
                        for (jk, (gx, gy)) in grads.iter().enumerate() {
                            let t = i * n * n + jk;
                            s += ad[t] * gx[p] + bd[t] * gy[p];
                        }
                        rhs[i * plane + p] = s;
                    }
                }
            }
        }
    }

    let out: Vec<f64> = u.iter().zip(&rhs).map(|(v, r)| v + g.tau * r).collect();
    Ok(g.with_field(Tensor::from_parts(g.u.shape().to_vec(), out)))
}

/// Tensor-form or conservation-form step.
pub fn tensor_step(g: &PdeGrid, a: &Tensor, b: &Tensor, conservation: bool) -> Result<PdeGrid> {
    let variant = if conservation { BlockVariant::Conservation } else { BlockVariant::TensorForm };
    quasilinear_step(g, &QuasiWeights::Tensor { a: a.clone(), b: b.clone() }, variant)
}
