use super::law::transform_tensor_io;
use super::{ChannelTransform, TransformKind};
use crate::blocks::{BlockConfig, BlockVariant, BlockWeights, Model};
use crate::error::{Error, Result};
use crate::nn::{Activation, ActivationKind, BatchNormState};
use crate::tensor::Tensor;

fn unsupported(msg: impl Into<String>) -> Error {
    Error::UnsupportedTransform(msg.into())
}

/// Per-channel action of a monomial transform on the expanded channels.
enum Expanded {
    /// New expanded channel `o` reads old channel `src[o]`.
    Perm(Vec<usize>),
    /// Expanded channel `o` is scaled by `d[o]`.
    Scale(Vec<f64>),
}

fn expanded(cfg: &BlockConfig, t: &ChannelTransform) -> Result<Expanded> {
    let ni = cfg.in_channels;
    let conservation = cfg.variant == BlockVariant::Conservation;
    let m = if cfg.variant.is_tensor() { 2 } else { cfg.expansion };
    let e = cfg.expanded();
    let split = |o: usize| {
        if conservation {
            let (jk, s) = (o / 2, o % 2);
            (jk / ni, Some(jk % ni), s)
        } else {
            (o / m, None, o % m)
        }
    };
    if let Some(p) = t.as_permutation() {
        return Ok(Expanded::Perm(
            (0..e)
                .map(|o| match split(o) {
                    (j, Some(k), s) => (p[j] * ni + p[k]) * 2 + s,
                    (j, None, s) => p[j] * m + s,
                })
                .collect(),
        ));
    }
    if let Some(d) = t.as_diagonal() {
        return Ok(Expanded::Scale(
            (0..e)
                .map(|o| match split(o) {
                    (j, Some(k), _) => d[j] * d[k],
                    (j, None, _) => d[j],
                })
                .collect(),
        ));
    }
    Err(unsupported(format!("no expanded-channel action for a {} transform", t.kind())))
}

impl Expanded {
    /// `E M` for `M: [e, k]`.
    fn left(&self, m: &Tensor) -> Tensor {
        let cols = m.shape()[1];
        Tensor::from_fn(m.shape(), |t| {
            let (r, c) = (t / cols, t % cols);
            match self {
                Expanded::Perm(src) => m.at2(src[r], c),
                Expanded::Scale(d) => d[r] * m.at2(r, c),
            }
        })
    }

    /// `M E^-1` for `M: [k, e]`.
    fn right_inv(&self, m: &Tensor) -> Tensor {
        let cols = m.shape()[1];
        Tensor::from_fn(m.shape(), |t| {
            let (r, c) = (t / cols, t % cols);
            match self {
                Expanded::Perm(src) => m.at2(r, src[c]),
                Expanded::Scale(d) => m.at2(r, c) / d[c],
            }
        })
    }

    /// Per-channel kernels `[e, 1, kh, kw]` relabelled with the channels.
    fn kernels(&self, k: &Tensor) -> Tensor {
        match self {
            Expanded::Scale(_) => k.clone(),
            Expanded::Perm(src) => {
                let per = k.len() / k.shape()[0];
                Tensor::from_fn(k.shape(), |t| k.data()[src[t / per] * per + t % per])
            }
        }
    }

    fn batchnorm(&self, bn: &BatchNormState) -> BatchNormState {
        match self {
            Expanded::Perm(src) => bn_permute(bn, src),
            Expanded::Scale(d) => bn_scale(bn, d),
        }
    }
}

fn bn_permute(bn: &BatchNormState, src: &[usize]) -> BatchNormState {
    let p = |t: &Tensor| Tensor::from_fn(t.shape(), |o| t.data()[src[o]]);
    BatchNormState {
        gamma: p(&bn.gamma),
        beta: p(&bn.beta),
        running_mean: p(&bn.running_mean),
        running_var: p(&bn.running_var),
        ..bn.clone()
    }
}

/// Eval-mode batchnorm on a channel scaled by `d`: `gamma (d x - d mu) / s + d beta`
/// equals `d` times the original output, with `s` (variance and epsilon) unchanged.
fn bn_scale(bn: &BatchNormState, d: &[f64]) -> BatchNormState {
    let s = |t: &Tensor| Tensor::from_fn(t.shape(), |o| d[o] * t.data()[o]);
    BatchNormState { running_mean: s(&bn.running_mean), beta: s(&bn.beta), ..bn.clone() }
}

/// Batchnorm over a stream transformed by `t` (permutation or diagonal).
fn bn_stream(bn: &BatchNormState, t: &ChannelTransform) -> Result<BatchNormState> {
    if let Some(p) = t.as_permutation() {
        Ok(bn_permute(bn, &p))
    } else if let Some(d) = t.as_diagonal() {
        Ok(bn_scale(bn, &d))
    } else {
        Err(unsupported(format!("batchnorm does not commute with a {} transform", t.kind())))
    }
}

/// `R(t)`: the transform itself for permutations, identity for diagonals.
/// State-mixing outputs follow permutations but stay scale-free.
fn relabel_only(t: &ChannelTransform) -> ChannelTransform {
    match t.kind() {
        TransformKind::Diagonal => ChannelTransform::identity(t.dim()),
        _ => t.clone(),
    }
}

fn mat_left(t: &ChannelTransform, m: &Tensor) -> Result<Tensor> {
    t.matrix().matmul(m)
}

fn mat_right_inv(m: &Tensor, t: &ChannelTransform) -> Result<Tensor> {
    m.matmul(t.inverse_matrix())
}

fn check_activation(act: Option<&Activation>, t: &ChannelTransform) -> Result<()> {
    let Some(act) = act else { return Ok(()) };
    let ok = match (act.kind, t.kind()) {
        (ActivationKind::Identity, _) => true,
        (_, TransformKind::Permutation) => true,
        (ActivationKind::Relu, TransformKind::Diagonal) => t.as_diagonal().unwrap().iter().all(|d| *d > 0.0),
        (k, TransformKind::Diagonal) if k.is_radial() => t.as_diagonal().unwrap().iter().all(|d| d.abs() == 1.0),
        (k, TransformKind::Orthogonal) => k.is_radial(),
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(unsupported(format!("{} activation does not commute with a {} transform", act.kind.name(), t.kind())))
    }
}

/// Co-transforms one block's weights so that, with input `T_in u`, the block
/// returns `T_out` times its original output.
///
/// Factored variants accept permutations and diagonals; the full-tensor
/// variants accept any transform through the tensor law, provided the block
/// has no batchnorm when the transform is not monomial. Activations must
/// commute with `t_out`.
pub fn transform_block(
    cfg: &BlockConfig,
    w: &BlockWeights,
    t_in: &ChannelTransform,
    t_out: &ChannelTransform,
) -> Result<BlockWeights> {
    w.check(cfg)?;
    if t_in.dim() != cfg.in_channels || t_out.dim() != cfg.channels {
        return Err(Error::shape("transform_block", &[t_out.dim(), t_in.dim()], &[cfg.channels, cfg.in_channels]));
    }
    if !cfg.needs_shortcut() && t_in.matrix() != t_out.matrix() {
        return Err(unsupported("an identity skip needs the same transform on input and output"));
    }
    if cfg.has_activation() {
        check_activation(cfg.activation.as_ref(), t_out)?;
    }
    let monomial = |t: &ChannelTransform| matches!(t.kind(), TransformKind::Permutation | TransformKind::Diagonal);
    let both_monomial = monomial(t_in) && monomial(t_out);
    if !cfg.variant.is_tensor() && !both_monomial {
        return Err(unsupported(format!(
            "{} blocks keep their factorization only under permutations and diagonal scalings, not {} / {}",
            cfg.variant.name(),
            t_in.kind(),
            t_out.kind()
        )));
    }
    let has_bn = w.bn_mid.is_some() || w.bn_out.is_some() || w.shortcut_bn.is_some();
    if has_bn && !both_monomial {
        return Err(unsupported("batchnorm blocks admit only permutation and diagonal transforms"));
    }
    if cfg.variant.is_tensor() && !cfg.weight_shared && !both_monomial {
        return Err(unsupported("per-channel depthwise kernels admit only permutation and diagonal transforms"));
    }

    let mut out = w.clone();
    let exp_in = if monomial(t_in) { Some(expanded(cfg, t_in)?) } else { None };
    if !cfg.weight_shared {
        if let Some(e) = &exp_in {
            out.dw = e.kernels(&w.dw);
        }
    }
    if let (Some(bn), Some(e)) = (&w.bn_mid, &exp_in) {
        out.bn_mid = Some(e.batchnorm(bn));
    }
    if let Some(bn) = &w.bn_out {
        out.bn_out = Some(bn_stream(bn, t_out)?);
    }
    if let Some(s) = &w.shortcut {
        out.shortcut = Some(mat_right_inv(&mat_left(t_out, s)?, t_in)?);
    }
    if let Some(bn) = &w.shortcut_bn {
        out.shortcut_bn = Some(bn_stream(bn, t_out)?);
    }

    if cfg.variant.is_tensor() {
        let a = w.tensor_a.as_ref().expect("checked");
        let b = w.tensor_b.as_ref().expect("checked");
        out.tensor_a = Some(transform_tensor_io(a, t_out, t_in)?);
        out.tensor_b = Some(transform_tensor_io(b, t_out, t_in)?);
        return Ok(out);
    }

    let e = exp_in.expect("monomial");
    let mix = w.mix.as_ref().expect("checked");
    out.mix = Some(match cfg.variant {
        BlockVariant::Eq3 | BlockVariant::Eq5 | BlockVariant::Eq7 => match &e {
            Expanded::Perm(_) => mat_right_inv(&e.left(mix), t_in)?,
            Expanded::Scale(_) => mat_right_inv(mix, t_in)?,
        },
        BlockVariant::Eq4 => mat_right_inv(&mat_left(&relabel_only(t_out), mix)?, t_in)?,
        BlockVariant::Eq6 => mat_right_inv(&mat_left(&relabel_only(t_in), mix)?, t_in)?,
        _ => unreachable!(),
    });
    if let Some(p) = &w.proj {
        out.proj = Some(mat_left(t_out, &e.right_inv(p))?);
    }
    if cfg.variant == BlockVariant::Eq5 && (cfg.in_channels != cfg.channels || t_in.matrix() != t_out.matrix()) {
        return Err(unsupported("Eq5 blocks sum fixed channel groups, so input and output transforms must agree"));
    }
    Ok(out)
}

/// [`transform_block`] for a width-preserving factored block and a single
/// permutation or diagonal transform.
pub fn transform_factored_block(cfg: &BlockConfig, w: &BlockWeights, t: &ChannelTransform) -> Result<BlockWeights> {
    if cfg.variant.is_tensor() {
        return Err(unsupported("use the tensor law for full-tensor blocks"));
    }
    transform_block(cfg, w, t, t)
}

/// The permutation rule applied verbatim to an arbitrary transform: mixes
/// become `(T (x) I) M T^-1` and projections `T P (T (x) I)^-1`.
///
/// This is exact only for permutations. For generic rotations the expanded
/// products no longer line up, which is the negative control for the
/// factored architecture. Eq3 and Eq7 blocks without batchnorm only.
pub fn naive_transform_block(cfg: &BlockConfig, w: &BlockWeights, t: &ChannelTransform) -> Result<BlockWeights> {
    if !matches!(cfg.variant, BlockVariant::Eq3 | BlockVariant::Eq7) || cfg.batchnorm || cfg.needs_shortcut() {
        return Err(unsupported("the naive rule is defined for width-preserving Eq3/Eq7 blocks without batchnorm"));
    }
    let (n, m) = (cfg.in_channels, cfg.expansion);
    let e = n * m;
    let kron = |t: &Tensor| {
        Tensor::from_fn(&[e, e], |idx| {
            let (r, c) = (idx / e, idx % e);
            if r % m == c % m {
                t.at2(r / m, c / m)
            } else {
                0.0
            }
        })
    };
    let big = kron(t.matrix());
    let big_inv = kron(t.inverse_matrix());
    let mut out = w.clone();
    out.mix = Some(big.matmul(w.mix.as_ref().expect("checked"))?.matmul(t.inverse_matrix())?);
    out.proj = Some(t.matrix().matmul(w.proj.as_ref().expect("checked"))?.matmul(&big_inv)?);
    Ok(out)
}

/// Stream transform of the stem output: stage 0's when the widths agree
/// (the first block then has an identity skip), the identity otherwise.
fn stem_transform(model: &Model, stages: &[ChannelTransform]) -> ChannelTransform {
    let s = model.config.stem_channels;
    if stages[0].dim() == s {
        stages[0].clone()
    } else {
        ChannelTransform::identity(s)
    }
}

/// Applies one stream transform per stage (widths `config.stage_channels`).
/// The stem, every block and the head are co-transformed so predictions are
/// unchanged.
pub fn transform_network(model: &Model, stages: &[ChannelTransform]) -> Result<Model> {
    let widths = &model.config.stage_channels;
    if stages.len() != widths.len() {
        return Err(Error::invalid(
            "transform_network",
            format!("{} transforms for {} stages", stages.len(), widths.len()),
        ));
    }
    for (s, (t, w)) in stages.iter().zip(widths).enumerate() {
        if t.dim() != *w {
            return Err(Error::invalid(
                "transform_network",
                format!("stage {s} has width {w} but its transform has dimension {}", t.dim()),
            ));
        }
    }
    let mut out = model.clone();
    let mut current = stem_transform(model, stages);
    let sc = model.config.stem_channels;
    let k = model.stem_conv2.len() / sc;
    let flat = model.stem_conv2.reshape(&[sc, k])?;
    out.stem_conv2 = current.matrix().matmul(&flat)?.reshape(model.stem_conv2.shape())?;

    for (block, (stage, _)) in out.blocks.iter_mut().zip(model.config.block_positions()) {
        let next = &stages[stage];
        block.weights = transform_block(&block.cfg, &block.weights, &current, next)?;
        current = next.clone();
    }
    out.head_weight = model.head_weight.matmul(current.inverse_matrix())?;
    Ok(out)
}

/// Effective coefficient tensors `[n, n_in, n_in]` of an Eq3 block:
/// `A_ijk = sum over x slots s of proj[i, j m + s] mix[j m + s, k]`, and `B`
/// likewise over the y slots (the upper half of each channel's slots).
pub fn effective_tensors(cfg: &BlockConfig, w: &BlockWeights) -> Result<(Tensor, Tensor)> {
    if cfg.variant != BlockVariant::Eq3 {
        return Err(unsupported("effective tensors are defined for Eq3 blocks"));
    }
    w.check(cfg)?;
    let (n, ni, m) = (cfg.channels, cfg.in_channels, cfg.expansion);
    let (mix, proj) = (w.mix.as_ref().expect("checked"), w.proj.as_ref().expect("checked"));
    let build = |slots: std::ops::Range<usize>| {
        Tensor::from_fn(&[n, ni, ni], |t| {
            let (i, j, k) = (t / (ni * ni), (t / ni) % ni, t % ni);
            slots.clone().map(|s| proj.at2(i, j * m + s) * mix.at2(j * m + s, k)).sum()
        })
    };
    let half = m / 2;
    Ok((build(0..half.max(1)), build(half.max(1)..m)))
}

/// Channel pairs `(j, j')` with `A_ij C_jk = A_ij' C_j'k` (and the same for
/// `B`, `D`) for all `i, k`, within `tol` relative to the largest entry.
///
/// Such degenerate pairs are what a non-monomial symmetry of the factored
/// form would need; generic weights have none.
pub fn factorization_degeneracies(cfg: &BlockConfig, w: &BlockWeights, tol: f64) -> Result<Vec<(usize, usize)>> {
    let (a, b) = effective_tensors(cfg, w)?;
    let (n, ni) = (cfg.channels, cfg.in_channels);
    let scale = a.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE);
    let same = |t: &Tensor, j: usize, jj: usize| {
        (0..n).all(|i| (0..ni).all(|k| (t.data()[(i * ni + j) * ni + k] - t.data()[(i * ni + jj) * ni + k]).abs() <= tol * scale))
    };
    let mut pairs = Vec::new();
    for j in 0..ni {
        for jj in j + 1..ni {
            if same(&a, j, jj) && same(&b, j, jj) {
                pairs.push((j, jj));
            }
        }
    }
    Ok(pairs)
}
