use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::report::{pointwise_weights, sparsity};
use super::{transform_network, ChannelTransform, TransformKind};
use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of a sparsification search.
#[derive(Debug, Clone)]
pub struct SparsifyOutcome {
    /// One transform per stage.
    pub transforms: Vec<ChannelTransform>,
    /// The model with the transforms applied.
    pub model: Model,
    pub l1_before: f64,
    pub l1_after: f64,
    pub near_zero_before: usize,
    pub near_zero_after: usize,
    pub total: usize,
}

fn l1(model: &Model) -> f64 {
    pointwise_weights(model).iter().map(|(_, t)| t.data().iter().map(|v| v.abs()).sum::<f64>()).sum()
}

struct Search<'a> {
    model: &'a Model,
    lambda: f64,
}

impl Search<'_> {
    fn objective(&self, ts: &[ChannelTransform]) -> Result<f64> {
        Ok(self.lambda * l1(&transform_network(self.model, ts)?))
    }
}

/// Searches per-stage transforms of `kind` that minimize `lambda` times the
/// L1 norm of the transformed pointwise weights.
///
/// Permutations use greedy pairwise swaps; diagonals use descent on
/// `log |d|`; orthogonal transforms use descent on the exponential of an
/// antisymmetric generator from several starts, then a Gauss-Newton polish
/// that drives the near-zero entries of the best start to zero. Every
/// candidate is an exact group element, so the returned model keeps the
/// original predictions. `lambda = 0` leaves the identity in place.
pub fn sparsify_search(model: &Model, kind: TransformKind, steps: usize, lambda: f64, seed: u64) -> Result<SparsifyOutcome> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("sparsify_search", format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let widths = model.config.stage_channels.clone();
    let search = Search { model, lambda };
    let transforms = match kind {
        TransformKind::Permutation => permutation_search(&search, &widths, steps)?,
        TransformKind::Diagonal => diagonal_search(&search, &widths, steps)?,
        TransformKind::Orthogonal => orthogonal_search(&search, &widths, steps, seed)?,
        TransformKind::General => {
            return Err(Error::UnsupportedTransform("sparsify_search supports permutation, diagonal and orthogonal".into()))
        }
    };
    let out = transform_network(model, &transforms)?;
    let (near_zero_before, total) = sparsity(&pointwise_weights(model));
    let (near_zero_after, _) = sparsity(&pointwise_weights(&out));
    Ok(SparsifyOutcome {
        l1_before: l1(model),
        l1_after: l1(&out),
        transforms,
        model: out,
        near_zero_before,
        near_zero_after,
        total,
    })
}

/// Improvements below this relative size are roundoff, not progress.
const REL_GAIN: f64 = 1e-12;

fn permutation_search(s: &Search, widths: &[usize], sweeps: usize) -> Result<Vec<ChannelTransform>> {
    let mut perms: Vec<Vec<usize>> = widths.iter().map(|&n| (0..n).collect()).collect();
    let build = |perms: &[Vec<usize>]| -> Result<Vec<ChannelTransform>> {
        perms.iter().map(|p| ChannelTransform::permutation(p)).collect()
    };
    let mut best = s.objective(&build(&perms)?)?;
    for _ in 0..sweeps {
        let mut improved = false;
        for st in 0..perms.len() {
            for i in 0..perms[st].len() {
                for j in i + 1..perms[st].len() {
                    perms[st].swap(i, j);
                    let v = s.objective(&build(&perms)?)?;
                    if v < best - REL_GAIN * best.abs() {
                        best = v;
                        improved = true;
                    } else {
                        perms[st].swap(i, j);
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    build(&perms)
}

/// Backtracking descent on a flat parameter vector with central-difference
/// gradients.
fn descend(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &mut Vec<f64>, steps: usize) -> Result<f64> {
    let mut fx = f(x)?;
    let mut lr = 0.1;
    let eps = 1e-6;
    for _ in 0..steps {
        let mut grad = vec![0.0; x.len()];
        for i in 0..x.len() {
            let keep = x[i];
            x[i] = keep + eps;
            let up = f(x)?;
            x[i] = keep - eps;
            let down = f(x)?;
            x[i] = keep;
            grad[i] = (up - down) / (2.0 * eps);
        }
        let gn = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gn == 0.0 || !gn.is_finite() {
            break;
        }
        let mut accepted = false;
        while lr > 1e-10 {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(v, g)| v - lr * g / gn).collect();
            let ft = f(&trial)?;
            if ft < fx - REL_GAIN * fx.abs() {
                *x = trial;
                fx = ft;
                lr *= 1.5;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(fx)
}

fn diagonal_search(s: &Search, widths: &[usize], steps: usize) -> Result<Vec<ChannelTransform>> {
    let build = |x: &[f64]| -> Result<Vec<ChannelTransform>> {
        let mut off = 0;
        widths
            .iter()
            .map(|&n| {
                let d: Vec<f64> = x[off..off + n].iter().map(|v| v.exp()).collect();
                off += n;
                ChannelTransform::diagonal(&d)
            })
            .collect()
    };
    let mut x = vec![0.0; widths.iter().sum()];
    if s.lambda > 0.0 {
        descend(&mut |x: &[f64]| s.objective(&build(x)?), &mut x, steps)?;
    }
    build(&x)
}

fn antisym_exp(theta: &[f64], n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    let mut t = 0;
    for i in 0..n {
        for j in i + 1..n {
            a[(i, j)] = theta[t];
            a[(j, i)] = -theta[t];
            t += 1;
        }
    }
    a.exp()
}

/// Nearest orthogonal matrix by QR with non-negative `R` diagonal.
fn reorthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn to_transform(q: &DMatrix<f64>) -> Result<ChannelTransform> {
    let n = q.nrows();
    ChannelTransform::orthogonal(Tensor::from_fn(&[n, n], |i| q[(i / n, i % n)]))
}

fn orthogonal_search(s: &Search, widths: &[usize], steps: usize, seed: u64) -> Result<Vec<ChannelTransform>> {
    let gens: Vec<usize> = widths.iter().map(|n| n * (n - 1) / 2).collect();
    let total: usize = gens.iter().sum();
    let rotate = |base: &[DMatrix<f64>], theta: &[f64]| -> Result<Vec<ChannelTransform>> {
        let mut off = 0;
        base.iter()
            .zip(&gens)
            .map(|(q, &g)| {
                let r = reorthonormalize(q * antisym_exp(&theta[off..off + g], q.nrows()));
                off += g;
                to_transform(&r)
            })
            .collect()
    };
    let identity: Vec<DMatrix<f64>> = widths.iter().map(|&n| DMatrix::identity(n, n)).collect();
    // Rejects unsupported models up front with a genuinely non-monomial element.
    let probe: Vec<f64> = (0..total).map(|i| 0.1 + 0.01 * i as f64).collect();
    s.objective(&rotate(&identity, &probe)?)?;
    if s.lambda == 0.0 || total == 0 {
        return rotate(&identity, &vec![0.0; total]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let restarts = 8;
    let mut best: Option<(f64, Vec<DMatrix<f64>>)> = None;
    for r in 0..restarts {
        let mut base: Vec<DMatrix<f64>> = if r == 0 {
            identity.clone()
        } else {
            widths
                .iter()
                .map(|&n| {
                    let t = ChannelTransform::random_orthogonal(n, &mut rng);
                    DMatrix::from_row_slice(n, n, t.matrix().data())
                })
                .collect()
        };
        // Re-centre the generator after every round so the chart stays small.
        let rounds = 4;
        let mut value = f64::INFINITY;
        for _ in 0..rounds {
            let mut theta = vec![0.0; total];
            value = descend(&mut |th: &[f64]| s.objective(&rotate(&base, th)?), &mut theta, steps.div_ceil(rounds))?;
            base = rotate(&base, &theta)?
                .iter()
                .map(|t| DMatrix::from_row_slice(t.dim(), t.dim(), t.matrix().data()))
                .collect();
        }
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, base));
        }
    }
    let (_, base) = best.expect("at least one restart");
    polish(s.model, &base, &gens, &rotate)
}

/// Maps generator matrices and coefficients to one transform per stage.
type RotateFn<'a> = dyn Fn(&[DMatrix<f64>], &[f64]) -> Result<Vec<ChannelTransform>> + 'a;

/// Gauss-Newton on the entries that the descent left near zero, driving
/// them to exact zero when the model has an exactly sparse orthogonal frame.
fn polish(
    model: &Model,
    base: &[DMatrix<f64>],
    gens: &[usize],
    rotate: &RotateFn,
) -> Result<Vec<ChannelTransform>> {
    let total: usize = gens.iter().sum();
    let flat = |ts: &[ChannelTransform]| -> Result<Vec<f64>> {
        let m = transform_network(model, ts)?;
        Ok(pointwise_weights(&m).iter().flat_map(|(_, t)| t.data().to_vec()).collect())
    };
    let start = rotate(base, &vec![0.0; total])?;
    let m0 = transform_network(model, &start)?;
    // Entries below 1e-3 of their matrix's max-abs are candidates for zero.
    let mut mask = Vec::new();
    for (_, t) in pointwise_weights(&m0) {
        let cut = 1e-3 * t.max_abs();
        mask.extend(t.data().iter().map(|v| v.abs() <= cut));
    }
    let picked: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
    if picked.is_empty() {
        return Ok(start);
    }
    let residual = |theta: &[f64], base: &[DMatrix<f64>]| -> Result<DVector<f64>> {
        let v = flat(&rotate(base, theta)?)?;
        Ok(DVector::from_iterator(picked.len(), picked.iter().map(|&i| v[i])))
    };
    let mut base: Vec<DMatrix<f64>> = base.to_vec();
    let mut r = residual(&vec![0.0; total], &base)?;
    for _ in 0..30 {
        let r_norm = r.norm();
        if r_norm < 1e-15 {
            break;
        }
        let eps = 1e-7;
        let mut jac = DMatrix::zeros(picked.len(), total);
        for p in 0..total {
            let mut th = vec![0.0; total];
            th[p] = eps;
            let up = residual(&th, &base)?;
            th[p] = -eps;
            let down = residual(&th, &base)?;
            jac.set_column(p, &((up - down) / (2.0 * eps)));
        }
        let jt = jac.transpose();
        let lhs = &jt * &jac + DMatrix::identity(total, total) * 1e-12;
        let Some(step) = lhs.lu().solve(&(-(&jt * &r))) else { break };
        let theta: Vec<f64> = step.iter().copied().collect();
        let next = residual(&theta, &base)?;
        if next.norm() >= r_norm {
            break;
        }
        base = rotate(&base, &theta)?
            .iter()
            .map(|t| DMatrix::from_row_slice(t.dim(), t.dim(), t.matrix().data()))
            .collect();
        r = next;
    }
    rotate(&base, &vec![0.0; total])
}
