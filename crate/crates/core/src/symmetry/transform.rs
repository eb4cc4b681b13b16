use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on `T T^-1 = I` and on orthogonality.
pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Permutation,
    Diagonal,
    Orthogonal,
    General,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Permutation => "permutation",
            TransformKind::Diagonal => "diagonal",
            TransformKind::Orthogonal => "orthogonal",
            TransformKind::General => "general",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "permutation" | "perm" => Ok(TransformKind::Permutation),
            "diagonal" | "diag" => Ok(TransformKind::Diagonal),
            "orthogonal" | "orth" => Ok(TransformKind::Orthogonal),
            "general" | "gl" => Ok(TransformKind::General),
            other => Err(Error::Config(format!("unknown transform kind '{other}'"))),
        }
    }
}

/// Invertible change of channel coordinates `u~_i = sum_j T_ij u_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTransform {
    kind: TransformKind,
    t: Tensor,
    t_inv: Tensor,
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    let n = t.shape()[0];
    DMatrix::from_row_slice(n, n, t.data())
}

fn from_na(m: &DMatrix<f64>) -> Tensor {
    let n = m.nrows();
    Tensor::from_fn(&[n, n], |i| m[(i / n, i % n)])
}

fn square(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n, m] if n == m && *n > 0 => Ok(*n),
        s => Err(Error::shape("channel transform", s, &[s.first().copied().unwrap_or(0); 2])),
    }
}

impl ChannelTransform {
    pub fn identity(n: usize) -> Self {
        ChannelTransform { kind: TransformKind::Permutation, t: Tensor::identity(n), t_inv: Tensor::identity(n) }
    }

    /// `u~_i = u_{perm[i]}`.
    pub fn permutation(perm: &[usize]) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(Error::invalid("permutation transform", format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        let mut t = Tensor::zeros(&[n, n]);
        let mut t_inv = Tensor::zeros(&[n, n]);
        for (i, &p) in perm.iter().enumerate() {
            t.data_mut()[i * n + p] = 1.0;
            t_inv.data_mut()[p * n + i] = 1.0;
        }
        Ok(ChannelTransform { kind: TransformKind::Permutation, t, t_inv })
    }

    pub fn diagonal(d: &[f64]) -> Result<Self> {
        let n = d.len();
        if n == 0 {
            return Err(Error::invalid("diagonal transform", "empty diagonal"));
        }
        if let Some(&z) = d.iter().find(|v| **v == 0.0 || !v.is_finite()) {
            return Err(Error::Singular { pivot: z });
        }
        let mut t = Tensor::zeros(&[n, n]);
        let mut t_inv = Tensor::zeros(&[n, n]);
        for (i, &v) in d.iter().enumerate() {
            t.data_mut()[i * n + i] = v;
            t_inv.data_mut()[i * n + i] = 1.0 / v;
        }
        Ok(ChannelTransform { kind: TransformKind::Diagonal, t, t_inv })
    }

    /// Accepts `q` when `q q^T = I` within [`IDENTITY_TOL`].
    pub fn orthogonal(q: Tensor) -> Result<Self> {
        square(&q)?;
        let qt = q.transpose2()?;
        let dev = q.matmul(&qt)?.max_abs_diff(&Tensor::identity(q.shape()[0]));
        if dev > IDENTITY_TOL {
            return Err(Error::invalid("orthogonal transform", format!("q q^T deviates from I by {dev:e}")));
        }
        Ok(ChannelTransform { kind: TransformKind::Orthogonal, t: q, t_inv: qt })
    }

    /// Any invertible matrix; the inverse comes from an LU factorization.
    pub fn general(m: Tensor) -> Result<Self> {
        square(&m)?;
        let t_inv = invert(&m)?;
        Ok(ChannelTransform { kind: TransformKind::General, t: m, t_inv })
    }

    pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        Self::permutation(&p).expect("shuffle yields a permutation")
    }

    /// Magnitudes log-uniform in `[1/2, 2]`; negative entries when `signed`.
    pub fn random_diagonal<R: Rng + ?Sized>(n: usize, signed: bool, rng: &mut R) -> Self {
        let d: Vec<f64> = (0..n)
            .map(|_| {
                let mag = (rng.random_range(-1.0..1.0) * std::f64::consts::LN_2).exp();
                if signed && rng.random_bool(0.5) {
                    -mag
                } else {
                    mag
                }
            })
            .collect();
        Self::diagonal(&d).expect("nonzero diagonal")
    }

    /// Haar-distributed orthogonal matrix from the QR factorization of a
    /// Gaussian matrix, with column signs fixed by `R`'s diagonal.
    pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let q = from_na(&q);
        // Re-derive the inverse exactly as the transpose.
        let qt = q.transpose2().expect("square");
        ChannelTransform { kind: TransformKind::Orthogonal, t: q, t_inv: qt }
    }

    /// Gaussian matrix plus `2 I`, redrawn until its condition number is below 50.
    pub fn random_general<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        loop {
            let m = DMatrix::from_fn(n, n, |i, j| {
                let g: f64 = StandardNormal.sample(rng);
                g / (n as f64).sqrt() + if i == j { 2.0 } else { 0.0 }
            });
            let sv = m.singular_values();
            let (hi, lo) = (sv.max(), sv.min());
            if lo > 0.0 && hi / lo < 50.0 {
                return Self::general(from_na(&m)).expect("well conditioned");
            }
        }
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.t
    }

    pub fn inverse_matrix(&self) -> &Tensor {
        &self.t_inv
    }

    pub fn is_identity(&self) -> bool {
        self.t == Tensor::identity(self.dim())
    }

    /// `perm` with `u~_i = u_{perm[i]}`, for permutation transforms.
    pub fn as_permutation(&self) -> Option<Vec<usize>> {
        if self.kind != TransformKind::Permutation {
            return None;
        }
        let n = self.dim();
        Some((0..n).map(|i| (0..n).find(|&j| self.t.at2(i, j) == 1.0).expect("one per row")).collect())
    }

    /// Diagonal entries, for diagonal transforms.
    pub fn as_diagonal(&self) -> Option<Vec<f64>> {
        (self.kind == TransformKind::Diagonal).then(|| (0..self.dim()).map(|i| self.t.at2(i, i)).collect())
    }

    pub fn inverse(&self) -> Self {
        ChannelTransform { kind: self.kind, t: self.t_inv.clone(), t_inv: self.t.clone() }
    }

    /// `self` after `other`: the matrix `T_self T_other`.
    pub fn compose(&self, other: &ChannelTransform) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::shape("compose transforms", self.t.shape(), other.t.shape()));
        }
        let kind = if self.kind == other.kind { self.kind } else { TransformKind::General };
        Ok(ChannelTransform { kind, t: self.t.matmul(&other.t)?, t_inv: other.t_inv.matmul(&self.t_inv)? })
    }

    /// Max deviation of `T T^-1` from the identity.
    pub fn inverse_residual(&self) -> f64 {
        self.t.matmul(&self.t_inv).expect("square").max_abs_diff(&Tensor::identity(self.dim()))
    }

    /// Mixes the channel axis of `[N, n, H, W]` or `[n, H, W]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        mix_channels(&self.t, x)
    }

    pub fn apply_inverse(&self, x: &Tensor) -> Result<Tensor> {
        mix_channels(&self.t_inv, x)
    }
}

fn mix_channels(m: &Tensor, x: &Tensor) -> Result<Tensor> {
    let n = m.shape()[0];
    let s = x.shape();
    let (batch, c, plane) = match s {
        [b, c, h, w] => (*b, *c, h * w),
        [c, h, w] => (1, *c, h * w),
        _ => return Err(Error::shape("channel transform apply", s, &[0, n, 0, 0])),
    };
    if c != n {
        return Err(Error::shape("channel transform apply", s, &[batch, n, 0, 0]));
    }
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let src = &x.data()[b * n * plane..(b + 1) * n * plane];
        let dst = &mut out[b * n * plane..(b + 1) * n * plane];
        for i in 0..n {
            for j in 0..n {
                let t = m.at2(i, j);
                if t == 0.0 {
                    continue;
                }
                for p in 0..plane {
                    dst[i * plane + p] += t * src[j * plane + p];
                }
            }
        }
    }
    Ok(Tensor::from_parts(s.to_vec(), out))
}

/// LU inverse; errors with the offending pivot when `m` is numerically singular.
pub(crate) fn invert(m: &Tensor) -> Result<Tensor> {
    let a = to_na(m);
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let lu = a.clone().lu();
    let u = lu.u();
    let pivot = (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    // NaN pivots land here too.
    if pivot.partial_cmp(&(1e-12 * scale)) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Singular { pivot });
    }
    let inv = lu.try_inverse().ok_or(Error::Singular { pivot })?;
    Ok(from_na(&inv))
}
