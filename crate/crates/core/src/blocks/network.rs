use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{block_graph, BnCtx, BoundBlock};
use super::{Block, BlockWeights, BnUpdate, NetworkConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, ConvSpec, Mode};
use crate::tensor::Tensor;

/// Stem, blocks and classification head.
///
/// The stem is a 7x7 convolution, batchnorm, then a 3x3 convolution, each
/// convolution with stride `stem_stride`. The head is global average pooling
/// followed by an affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub stem_conv1: Tensor,
    pub stem_bn: Option<BatchNormState>,
    pub stem_conv2: Tensor,
    pub blocks: Vec<Block>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Result of recording a forward pass on a graph.
pub struct ForwardOutput {
    pub logits: Var,
    /// One handle per entry of [`Model::params`], same order.
    pub params: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

impl Model {
    /// Randomly initialized network; the same seed gives the same weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &model.config;
        let c1 = model.stem_conv1.shape().to_vec();
        model.stem_conv1 = Tensor::randn(&c1, (1.0 / (c1[1] * 49) as f64).sqrt(), &mut rng);
        let c2 = model.stem_conv2.shape().to_vec();
        model.stem_conv2 = Tensor::randn(&c2, (1.0 / (c2[1] * 9) as f64).sqrt(), &mut rng);
        let depth = cfg.total_blocks();
        for b in &mut model.blocks {
            b.weights = BlockWeights::init(&b.cfg, depth, &mut rng)?;
        }
        let hw = model.head_weight.shape().to_vec();
        model.head_weight = Tensor::randn(&hw, (1.0 / hw[1] as f64).sqrt(), &mut rng);
        Ok(model)
    }

    /// Network with every weight zero and batchnorm at its defaults.
    pub fn zeroed(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let blocks = config
            .block_configs()
            .into_iter()
            .map(|cfg| Ok(Block { weights: BlockWeights::zeros(&cfg)?, cfg }))
            .collect::<Result<Vec<_>>>()?;
        let s = config.stem_channels;
        let last = *config.stage_channels.last().expect("validated");
        Ok(Model {
            stem_conv1: Tensor::zeros(&[s, config.in_channels, 7, 7]),
            stem_bn: config.batchnorm.then(|| BatchNormState::new(s)),
            stem_conv2: Tensor::zeros(&[s, s, 3, 3]),
            blocks,
            head_weight: Tensor::zeros(&[config.num_classes, last]),
            head_bias: Tensor::zeros(&[config.num_classes]),
            config,
        })
    }

    fn block_name(&self, i: usize) -> String {
        let (s, b) = self.config.block_positions()[i];
        format!("stage{s}.block{b}")
    }

    /// Trainable tensors with their names, in canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("stem.conv1".to_string(), &self.stem_conv1)];
        if let Some(bn) = &self.stem_bn {
            out.push(("stem.bn.gamma".into(), &bn.gamma));
            out.push(("stem.bn.beta".into(), &bn.beta));
        }
        out.push(("stem.conv2".into(), &self.stem_conv2));
        for (i, b) in self.blocks.iter().enumerate() {
            let prefix = self.block_name(i);
            out.extend(b.weights.params().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = (0..self.blocks.len()).map(|i| self.block_name(i)).collect();
        let Model {
            stem_conv1,
            stem_bn,
            stem_conv2,
            blocks,
            head_weight,
            head_bias,
            ..
        } = self;
        let mut out = vec![("stem.conv1".to_string(), stem_conv1)];
        if let Some(bn) = stem_bn {
            out.push(("stem.bn.gamma".into(), &mut bn.gamma));
            out.push(("stem.bn.beta".into(), &mut bn.beta));
        }
        out.push(("stem.conv2".into(), stem_conv2));
        for (b, prefix) in blocks.iter_mut().zip(&names) {
            out.extend(b.weights.params_mut().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.push(("head.weight".into(), head_weight));
        out.push(("head.bias".into(), head_bias));
        out
    }

    /// Every batchnorm layer with its name prefix.
    pub fn batchnorms(&self) -> Vec<(String, &BatchNormState)> {
        let mut out = Vec::new();
        if let Some(bn) = &self.stem_bn {
            out.push(("stem.bn".to_string(), bn));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let prefix = self.block_name(i);
            out.extend(b.weights.batchnorms().into_iter().map(|(n, s)| (format!("{prefix}.{n}"), s)));
        }
        out
    }

    pub fn batchnorms_mut(&mut self) -> Vec<(String, &mut BatchNormState)> {
        let names: Vec<String> = (0..self.blocks.len()).map(|i| self.block_name(i)).collect();
        let mut out = Vec::new();
        if let Some(bn) = &mut self.stem_bn {
            out.push(("stem.bn".to_string(), bn));
        }
        for (b, prefix) in self.blocks.iter_mut().zip(&names) {
            out.extend(b.weights.batchnorms_mut().into_iter().map(|(n, s)| (format!("{prefix}.{n}"), s)));
        }
        out
    }

    /// Non-trainable state (running statistics), named.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        self.batchnorms()
            .into_iter()
            .flat_map(|(n, s)| {
                [
                    (format!("{n}.running_mean"), &s.running_mean),
                    (format!("{n}.running_var"), &s.running_var),
                ]
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.batchnorms_mut()
            .into_iter()
            .flat_map(|(n, s)| {
                [
                    (format!("{n}.running_mean"), &mut s.running_mean),
                    (format!("{n}.running_var"), &mut s.running_var),
                ]
            })
            .collect()
    }

    /// Stream width at the output of the stem and of every stage.
    pub fn stage_widths(&self) -> Vec<usize> {
        let mut w = vec![self.config.stem_channels];
        w.extend(&self.config.stage_channels);
        w
    }

    /// Records a forward pass of `images` on `g`. In train mode batchnorm
    /// uses batch statistics, reported in the output for
    /// [`Model::apply_bn_updates`].
    pub fn forward_graph(&self, g: &mut Graph, images: Var, mode: Mode, trainable: bool) -> Result<ForwardOutput> {
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape("model input", &shape, &[0, self.config.in_channels, 0, 0]));
        }
        let bind = |g: &mut Graph, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let mut params = Vec::new();
        let mut updates = Vec::new();
        let cfg = &self.config;
        let s = cfg.stem_channels;

        let c1 = bind(g, &self.stem_conv1);
        params.push(c1);
        let mut x = g.conv2d(
            images,
            c1,
            &ConvSpec::dense(cfg.in_channels, s, 7, cfg.stem_stride).with_padding(cfg.padding),
        )?;
        if let Some(bn) = &self.stem_bn {
            let gamma = bind(g, &bn.gamma);
            let beta = bind(g, &bn.beta);
            params.extend([gamma, beta]);
            let mut ctx = BnCtx { mode, updates: &mut updates };
            x = ctx.apply(g, x, gamma, beta, bn, "stem.bn".into())?;
        }
        let c2 = bind(g, &self.stem_conv2);
        params.push(c2);
        x = g.conv2d(x, c2, &ConvSpec::dense(s, s, 3, cfg.stem_stride).with_padding(cfg.padding))?;

        for (i, b) in self.blocks.iter().enumerate() {
            let (bound, vars) = BoundBlock::bind(&b.weights, g, trainable);
            params.extend(vars);
            let mut ctx = BnCtx { mode, updates: &mut updates };
            x = block_graph(g, x, &b.cfg, &b.weights, &bound, &mut ctx, &self.block_name(i))?;
        }
        let pooled = g.global_avg_pool(x)?;
        let hw = bind(g, &self.head_weight);
        let hb = bind(g, &self.head_bias);
        params.extend([hw, hb]);
        let logits = g.linear(pooled, hw, hb)?;
        Ok(ForwardOutput {
            logits,
            params,
            bn_updates: updates,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        let mut layers = self.batchnorms_mut();
        for u in updates {
            let (_, st) = layers
                .iter_mut()
                .find(|(n, _)| *n == u.layer)
                .ok_or_else(|| Error::invalid("batchnorm update", format!("unknown layer {}", u.layer)))?;
            st.update_running(&u.mean, &u.var, u.count);
        }
        Ok(())
    }

    /// Inference-mode logits `[N, classes]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward_graph(&mut g, x, Mode::Eval, false)?;
        Ok(g.value(out.logits).clone())
    }

    /// Mean cross-entropy and its gradient for every parameter, in
    /// [`Model::params`] order. Train mode also updates running statistics.
    pub fn loss_and_grads(&mut self, images: &Tensor, labels: &[usize], mode: Mode) -> Result<(f64, Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward_graph(&mut g, x, mode, true)?;
        let loss = g.softmax_cross_entropy(out.logits, labels)?;
        g.backward(loss)?;
        let grads = out
            .params
            .iter()
            .map(|&v| {
                g.grad_tensor(v)
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
            })
            .collect();
        let value = g.value(loss).item()?;
        let logits = g.value(out.logits).clone();
        if mode == Mode::Train {
            self.apply_bn_updates(&out.bn_updates)?;
        }
        Ok((value, grads, logits))
    }
}

/// Exact number of trainable scalars. Weight-shared depthwise banks count once.
pub fn count_parameters(model: &Model) -> usize {
    model.params().iter().map(|(_, t)| t.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockVariant;
    use crate::nn::Activation;

    fn tiny(variant: BlockVariant) -> NetworkConfig {
        NetworkConfig {
            stem_channels: 4,
            stage_depths: vec![1, 1],
            stage_channels: vec![4, 8],
            num_classes: 3,
            image_size: 8,
            stem_stride: 1,
            ..NetworkConfig::desk(variant)
        }
    }

    #[test]
    fn one_stage_smoke() {
        let cfg = NetworkConfig {
            stage_depths: vec![1],
            stage_channels: vec![4],
            activation: Activation::identity(),
            ..tiny(BlockVariant::Eq3)
        };
        let m = Model::new(cfg, 0).unwrap();
        let x = Tensor::ones(&[2, 3, 8, 8]);
        assert_eq!(m.forward(&x).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn names_are_unique_and_orders_agree() {
        for v in BlockVariant::ALL {
            let mut m = Model::new(tiny(v), 1).unwrap();
            let a: Vec<(String, Vec<usize>)> = m.params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
            let b: Vec<(String, Vec<usize>)> =
                m.params_mut().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
            assert_eq!(a, b);
            let mut names: Vec<&String> = a.iter().map(|(n, _)| n).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), a.len());
        }
    }

    #[test]
    fn graph_param_order_matches_params() {
        let m = Model::new(tiny(BlockVariant::Eq7), 2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 3, 8, 8]));
        let out = m.forward_graph(&mut g, x, Mode::Eval, true).unwrap();
        let params = m.params();
        assert_eq!(out.params.len(), params.len());
        for (v, (_, t)) in out.params.iter().zip(&params) {
            assert_eq!((g.value(*v).shape(), g.value(*v).data()), (t.shape(), t.data()));
        }
    }

    #[test]
    fn train_mode_moves_running_stats() {
        let mut m = Model::new(tiny(BlockVariant::Eq3), 3).unwrap();
        let before = m.stem_bn.clone().unwrap();
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| (i as f64 * 0.37).sin());
        m.loss_and_grads(&x, &[0, 1], Mode::Train).unwrap();
        assert_ne!(m.stem_bn.as_ref().unwrap().running_mean, before.running_mean);
    }
}
