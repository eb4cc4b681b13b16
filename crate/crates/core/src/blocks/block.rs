use rand::Rng;

use super::{ActivationPosition, BlockConfig, BlockVariant};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, ConvSpec, Mode};
use crate::tensor::Tensor;

/// Weights of one block. Matrices are stored 2-D (`[out, in]`) and applied as
/// 1x1 convolutions; the depthwise bank is `[kernels, 1, 3, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub dw: Tensor,
    pub mix: Option<Tensor>,
    pub proj: Option<Tensor>,
    /// `[n, n_in, n_in]` coefficient tensors of the tensor variants.
    pub tensor_a: Option<Tensor>,
    pub tensor_b: Option<Tensor>,
    pub bn_mid: Option<BatchNormState>,
    pub bn_out: Option<BatchNormState>,
    pub shortcut: Option<Tensor>,
    pub shortcut_bn: Option<BatchNormState>,
}

/// A block configuration together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub cfg: BlockConfig,
    pub weights: BlockWeights,
}

struct Shapes {
    dw: [usize; 4],
    mix: Option<[usize; 2]>,
    proj: Option<[usize; 2]>,
    tensor: Option<[usize; 3]>,
    bn_mid: Option<usize>,
}

fn shapes(cfg: &BlockConfig) -> Shapes {
    let (ni, n, m) = (cfg.in_channels, cfg.channels, cfg.expansion);
    let e = cfg.expanded();
    let bank = if cfg.variant.is_tensor() { 2 } else { m };
    let dw = [if cfg.weight_shared { bank } else { e }, 1, 3, 3];
    let (mix, proj) = match cfg.variant {
        BlockVariant::Eq3 | BlockVariant::Eq7 => (Some([e, ni]), Some([n, e])),
        BlockVariant::Eq4 => (Some([n, ni]), Some([n, e])),
        BlockVariant::Eq5 => (Some([e, ni]), None),
        BlockVariant::Eq6 => (Some([ni, ni]), Some([n, e])),
        BlockVariant::TensorForm | BlockVariant::Conservation => (None, None),
    };
    Shapes {
        dw,
        mix,
        proj,
        tensor: cfg.variant.is_tensor().then_some([n, ni, ni]),
        bn_mid: (cfg.batchnorm && !cfg.variant.is_tensor()).then_some(e),
    }
}

impl BlockWeights {
    /// All-zero weights (batchnorm at its defaults) of the right shapes.
    pub fn zeros(cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let s = shapes(cfg);
        let (ni, n) = (cfg.in_channels, cfg.channels);
        Ok(BlockWeights {
            dw: Tensor::zeros(&s.dw),
            mix: s.mix.map(|sh| Tensor::zeros(&sh)),
            proj: s.proj.map(|sh| Tensor::zeros(&sh)),
            tensor_a: s.tensor.map(|sh| Tensor::zeros(&sh)),
            tensor_b: s.tensor.map(|sh| Tensor::zeros(&sh)),
            bn_mid: s.bn_mid.map(BatchNormState::new),
            bn_out: cfg.batchnorm.then(|| BatchNormState::new(n)),
            shortcut: cfg.needs_shortcut().then(|| Tensor::zeros(&[n, ni])),
            shortcut_bn: (cfg.batchnorm && cfg.needs_shortcut()).then(|| BatchNormState::new(n)),
        })
    }

    /// Random initialization. The residual branch's last linear map is scaled
    /// by `1 / depth`, which plays the role of the time step.
    pub fn init<R: Rng + ?Sized>(cfg: &BlockConfig, depth: usize, rng: &mut R) -> Result<Self> {
        let mut w = Self::zeros(cfg)?;
        let tau = 1.0 / depth.max(1) as f64;
        w.dw = Tensor::randn(w.dw.shape(), 1.0 / 3.0, rng);
        let fan = |t: &Tensor| (1.0 / t.shape()[1] as f64).sqrt();
        let mix_scale = if cfg.variant == BlockVariant::Eq5 { tau } else { 1.0 };
        if let Some(t) = &mut w.mix {
            *t = Tensor::randn(t.shape(), fan(t) * mix_scale, rng);
        }
        if let Some(t) = &mut w.proj {
            *t = Tensor::randn(t.shape(), fan(t) * tau, rng);
        }
        let tstd = tau / cfg.in_channels as f64;
        for t in [&mut w.tensor_a, &mut w.tensor_b].into_iter().flatten() {
            *t = Tensor::randn(t.shape(), tstd, rng);
        }
        if let Some(t) = &mut w.shortcut {
            *t = Tensor::randn(t.shape(), fan(t), rng);
        }
        Ok(w)
    }

    /// Trainable tensors in canonical order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("dw", &self.dw)];
        let opt = [
            ("mix", &self.mix),
            ("proj", &self.proj),
            ("tensor_a", &self.tensor_a),
            ("tensor_b", &self.tensor_b),
        ];
        out.extend(opt.into_iter().filter_map(|(n, t)| t.as_ref().map(|t| (n, t))));
        for (gn, bn, st) in [
            ("bn_mid.gamma", "bn_mid.beta", &self.bn_mid),
            ("bn_out.gamma", "bn_out.beta", &self.bn_out),
        ] {
            if let Some(st) = st {
                out.push((gn, &st.gamma));
                out.push((bn, &st.beta));
            }
        }
        if let Some(t) = &self.shortcut {
            out.push(("shortcut", t));
        }
        if let Some(st) = &self.shortcut_bn {
            out.push(("shortcut_bn.gamma", &st.gamma));
            out.push(("shortcut_bn.beta", &st.beta));
        }
        out
    }

    /// Same order as [`BlockWeights::params`].
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let BlockWeights {
            dw,
            mix,
            proj,
            tensor_a,
            tensor_b,
            bn_mid,
            bn_out,
            shortcut,
            shortcut_bn,
        } = self;
        let mut out = vec![("dw", dw)];
        let opt = [("mix", mix), ("proj", proj), ("tensor_a", tensor_a), ("tensor_b", tensor_b)];
        out.extend(opt.into_iter().filter_map(|(n, t)| t.as_mut().map(|t| (n, t))));
        for (gn, bn, st) in [("bn_mid.gamma", "bn_mid.beta", bn_mid), ("bn_out.gamma", "bn_out.beta", bn_out)] {
            if let Some(st) = st {
                out.push((gn, &mut st.gamma));
                out.push((bn, &mut st.beta));
            }
        }
        if let Some(t) = shortcut {
            out.push(("shortcut", t));
        }
        if let Some(st) = shortcut_bn {
            out.push(("shortcut_bn.gamma", &mut st.gamma));
            out.push(("shortcut_bn.beta", &mut st.beta));
        }
        out
    }

    /// Batchnorm layers with their name prefixes, in execution order.
    pub fn batchnorms(&self) -> Vec<(&'static str, &BatchNormState)> {
        [("bn_mid", &self.bn_mid), ("bn_out", &self.bn_out), ("shortcut_bn", &self.shortcut_bn)]
            .into_iter()
            .filter_map(|(n, s)| s.as_ref().map(|s| (n, s)))
            .collect()
    }

    pub fn batchnorms_mut(&mut self) -> Vec<(&'static str, &mut BatchNormState)> {
        [("bn_mid", &mut self.bn_mid), ("bn_out", &mut self.bn_out), ("shortcut_bn", &mut self.shortcut_bn)]
            .into_iter()
            .filter_map(|(n, s)| s.as_mut().map(|s| (n, s)))
            .collect()
    }

    /// Checks every tensor against the shapes `cfg` requires.
    pub fn check(&self, cfg: &BlockConfig) -> Result<()> {
        let reference = Self::zeros(cfg)?;
        let a = self.params();
        let b = reference.params();
        if a.len() != b.len() {
            return Err(Error::invalid(
                "block weights",
                format!("expected {} tensors for {}, got {}", b.len(), cfg.variant, a.len()),
            ));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::shape("block weights", ta.shape(), tb.shape()));
            }
        }
        Ok(())
    }
}

/// Graph handles for one block's parameters, looked up by name.
pub(crate) struct BoundBlock {
    vars: Vec<(&'static str, Var)>,
}

impl BoundBlock {
    pub(crate) fn bind(weights: &BlockWeights, g: &mut Graph, trainable: bool) -> (Self, Vec<Var>) {
        let vars: Vec<(&'static str, Var)> = weights
            .params()
            .into_iter()
            .map(|(n, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (n, v)
            })
            .collect();
        let list = vars.iter().map(|(_, v)| *v).collect();
        (BoundBlock { vars }, list)
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid("block", format!("missing weight '{name}'")))
    }
}

/// Batch statistics produced by a train-mode batchnorm, to be folded into
/// the layer's running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) struct BnCtx<'a> {
    pub mode: Mode,
    pub updates: &'a mut Vec<BnUpdate>,
}

impl BnCtx<'_> {
    pub(crate) fn apply(
        &mut self,
        g: &mut Graph,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        layer: String,
    ) -> Result<Var> {
        match self.mode {
            Mode::Train => {
                let (y, mean, var, count) = g.batchnorm_train(x, gamma, beta, state.epsilon)?;
                self.updates.push(BnUpdate { layer, mean, var, count });
                Ok(y)
            }
            Mode::Eval => g.batchnorm_eval(
                x,
                gamma,
                beta,
                state.running_mean.data(),
                state.running_var.data(),
                state.epsilon,
            ),
        }
    }
}

fn pointwise(g: &mut Graph, x: Var, w: Var, stride: usize) -> Result<Var> {
    let s = g.value(w).shape().to_vec();
    let w4 = g.reshape(w, &[s[0], s[1], 1, 1])?;
    g.conv2d(x, w4, &ConvSpec::pointwise(s[1], s[0], stride))
}

/// Records one block on the graph.
pub(crate) fn block_graph(
    g: &mut Graph,
    u: Var,
    cfg: &BlockConfig,
    w: &BlockWeights,
    bound: &BoundBlock,
    bn: &mut BnCtx<'_>,
    prefix: &str,
) -> Result<Var> {
    let shape = g.value(u).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::shape("block input", &shape, &[0, cfg.in_channels, 0, 0]));
    }
    let (ni, m, s) = (cfg.in_channels, cfg.expansion, cfg.stride);
    let dw = bound.get("dw")?;
    let depthwise = |channels: usize, mult: usize| {
        ConvSpec::depthwise(channels, mult, 3, s, cfg.weight_shared).with_padding(cfg.padding)
    };
    let mut bn_named = |g: &mut Graph, x: Var, name: &str, state: &Option<BatchNormState>| -> Result<Var> {
        match state {
            Some(st) => {
                let gamma = bound.get(&format!("{name}.gamma"))?;
                let beta = bound.get(&format!("{name}.beta"))?;
                bn.apply(g, x, gamma, beta, st, format!("{prefix}.{name}"))
            }
            None => Ok(x),
        }
    };

    let r = match cfg.variant {
        BlockVariant::Eq3 | BlockVariant::Eq5 => {
            let d = g.conv2d(u, dw, &depthwise(ni, m))?;
            let d = bn_named(g, d, "bn_mid", &w.bn_mid)?;
            let c = pointwise(g, u, bound.get("mix")?, s)?;
            let prod = g.mul(d, c)?;
            if cfg.variant == BlockVariant::Eq3 {
                pointwise(g, prod, bound.get("proj")?, 1)?
            } else {
                g.group_sum(prod, cfg.expanded() / cfg.channels)?
            }
        }
        BlockVariant::Eq4 => {
            let d = g.conv2d(u, dw, &depthwise(ni, m))?;
            let d = bn_named(g, d, "bn_mid", &w.bn_mid)?;
            let a = pointwise(g, d, bound.get("proj")?, 1)?;
            let c = pointwise(g, u, bound.get("mix")?, s)?;
            g.mul(a, c)?
        }
        BlockVariant::Eq6 => {
            let c = pointwise(g, u, bound.get("mix")?, 1)?;
            let p = g.mul(u, c)?;
            let d = g.conv2d(p, dw, &depthwise(ni, m))?;
            let d = bn_named(g, d, "bn_mid", &w.bn_mid)?;
            pointwise(g, d, bound.get("proj")?, 1)?
        }
        BlockVariant::Eq7 => {
            let c = pointwise(g, u, bound.get("mix")?, 1)?;
            let rep: Vec<usize> = (0..ni * m).map(|i| i / m).collect();
            let ur = g.channel_gather(u, &rep)?;
            let p = g.mul(ur, c)?;
            let d = g.conv2d(p, dw, &depthwise(ni * m, 1))?;
            let d = bn_named(g, d, "bn_mid", &w.bn_mid)?;
            pointwise(g, d, bound.get("proj")?, 1)?
        }
        BlockVariant::TensorForm | BlockVariant::Conservation => {
            let n = cfg.channels;
            let (src, width) = if cfg.variant == BlockVariant::TensorForm {
                (u, ni)
            } else {
                (g.channel_outer(u, u)?, ni * ni)
            };
            let d = g.conv2d(src, dw, &depthwise(width, 2))?;
            let even: Vec<usize> = (0..width).map(|j| 2 * j).collect();
            let odd: Vec<usize> = (0..width).map(|j| 2 * j + 1).collect();
            let dx = g.channel_gather(d, &even)?;
            let dy = g.channel_gather(d, &odd)?;
            let (fx, fy) = if cfg.variant == BlockVariant::TensorForm {
                let us = if s == 1 { u } else { g.subsample(u, s)? };
                (g.channel_outer(dx, us)?, g.channel_outer(dy, us)?)
            } else {
                (dx, dy)
            };
            let ta = bound.get("tensor_a")?;
            let tb = bound.get("tensor_b")?;
            let ta = g.reshape(ta, &[n, ni * ni])?;
            let tb = g.reshape(tb, &[n, ni * ni])?;
            let rx = pointwise(g, fx, ta, 1)?;
            let ry = pointwise(g, fy, tb, 1)?;
            g.add(rx, ry)?
        }
    };
    let r = bn_named(g, r, "bn_out", &w.bn_out)?;

    let skip = match &w.shortcut {
        Some(_) => {
            let sc = pointwise(g, u, bound.get("shortcut")?, s)?;
            bn_named(g, sc, "shortcut_bn", &w.shortcut_bn)?
        }
        None => u,
    };
    match (cfg.activation.filter(|_| cfg.has_activation()), cfg.activation_position) {
        (None, _) => g.add(skip, r),
        (Some(act), ActivationPosition::AfterResidual) => {
            let sum = g.add(skip, r)?;
            Ok(g.activation(sum, &act))
        }
        (Some(act), ActivationPosition::BeforeResidual) => {
            let a = g.activation(r, &act);
            g.add(skip, a)
        }
    }
}

/// Applies one block in inference mode (batchnorm uses running statistics).
pub fn block_forward(u: &Tensor, cfg: &BlockConfig, weights: &BlockWeights) -> Result<Tensor> {
    cfg.validate()?;
    weights.check(cfg)?;
    let mut g = Graph::new();
    let x = g.constant(u.clone());
    let (bound, _) = BoundBlock::bind(weights, &mut g, false);
    let mut updates = Vec::new();
    let mut bn = BnCtx {
        mode: Mode::Eval,
        updates: &mut updates,
    };
    let y = block_graph(&mut g, x, cfg, weights, &bound, &mut bn, "block")?;
    Ok(g.value(y).clone())
}
