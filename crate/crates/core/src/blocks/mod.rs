//! Residual blocks that each perform one explicit Euler step of a
//! quasi-linear first-order system, and the staged network built from them.
//!
//! Channel layout inside a block: the depthwise 3x3 splits input channel `j`
//! into `m` consecutive channels `j*m .. j*m + m`. For the factored variants
//! the first `m/2` of these are the x-branch and the rest the y-branch, so the
//! stacked mixing matrix has row `j*m + s` equal to row `j` of `C` (x slots)
//! or `D` (y slots), and the stacked projection has column `j*m + s` equal to
//! column `j` of `A` or `B`.

mod block;
mod network;
mod tensorform;

pub use block::{block_forward, Block, BlockWeights, BnUpdate};
pub use network::{count_parameters, ForwardOutput, Model};
pub use tensorform::{central_difference_kernels, tensorform_forward, MAX_TENSOR_CHANNELS};

use crate::error::{Error, Result};
use crate::nn::{Activation, ActivationKind, PaddingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockVariant {
    /// `sum_j A_ij (C u)_j d_x u_j + sum_j B_ij (D u)_j d_y u_j`.
    Eq3,
    /// `(C u)_i (A d_x u)_i + (C u)_i (B d_y u)_i`; the two mixing matrices are
    /// one shared 1x1 layer.
    Eq4,
    /// `(C u)_i d_x u_i + (D u)_i d_y u_i`; no output projection.
    Eq5,
    /// `sum_j A_ij d_x (u_j (C u)_j) + sum_j B_ij d_y (u_j (C u)_j)`.
    Eq6,
    /// As `Eq6` with a distinct `D` for the y-branch.
    Eq7,
    /// Full third-order coefficient tensors: `sum_jk T_ijk u_k d u_j`.
    TensorForm,
    /// Full tensors in divergence form: `sum_jk T_ijk d(u_j u_k)`.
    Conservation,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 7] = [
        BlockVariant::Eq3,
        BlockVariant::Eq4,
        BlockVariant::Eq5,
        BlockVariant::Eq6,
        BlockVariant::Eq7,
        BlockVariant::TensorForm,
        BlockVariant::Conservation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::Eq3 => "eq3",
            BlockVariant::Eq4 => "eq4",
            BlockVariant::Eq5 => "eq5",
            BlockVariant::Eq6 => "eq6",
            BlockVariant::Eq7 => "eq7",
            BlockVariant::TensorForm => "tensor",
            BlockVariant::Conservation => "conservation",
        }
    }

    pub fn is_tensor(self) -> bool {
        matches!(self, BlockVariant::TensorForm | BlockVariant::Conservation)
    }
}

impl std::fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BlockVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "eq3" | "3" => BlockVariant::Eq3,
            "eq4" | "4" => BlockVariant::Eq4,
            "eq5" | "5" => BlockVariant::Eq5,
            "eq6" | "6" => BlockVariant::Eq6,
            "eq7" | "7" => BlockVariant::Eq7,
            "tensor" | "tensorform" | "tensor-form" => BlockVariant::TensorForm,
            "conservation" | "tensor-conservation" => BlockVariant::Conservation,
            other => return Err(Error::Config(format!("unknown block variant '{other}'"))),
        })
    }
}

/// Where the block activation sits relative to the residual sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationPosition {
    /// `sigma(skip + r)`.
    #[default]
    AfterResidual,
    /// `skip + sigma(r)`.
    BeforeResidual,
}

impl std::str::FromStr for ActivationPosition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "after" | "after-residual" => Ok(ActivationPosition::AfterResidual),
            "before" | "before-residual" => Ok(ActivationPosition::BeforeResidual),
            other => Err(Error::Config(format!("unknown activation position '{other}'"))),
        }
    }
}

impl std::fmt::Display for ActivationPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActivationPosition::AfterResidual => "after",
            ActivationPosition::BeforeResidual => "before",
        })
    }
}

/// Which blocks carry the activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationPlacement {
    /// Once per stage, on the stage's first (downsampling) block.
    #[default]
    AtDownsample,
    AllBlocks,
}

impl std::str::FromStr for ActivationPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ds" | "at_downsample" | "at-downsample" => Ok(ActivationPlacement::AtDownsample),
            "all" | "all_blocks" | "all-blocks" => Ok(ActivationPlacement::AllBlocks),
            other => Err(Error::Config(format!("unknown activation placement '{other}'"))),
        }
    }
}

impl std::fmt::Display for ActivationPlacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActivationPlacement::AtDownsample => "ds",
            ActivationPlacement::AllBlocks => "all",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub variant: BlockVariant,
    pub in_channels: usize,
    /// Output (stream) width `n`.
    pub channels: usize,
    /// Depthwise split per input channel. Tensor variants always use 2.
    pub expansion: usize,
    pub weight_shared: bool,
    pub stride: usize,
    pub activation: Option<Activation>,
    pub activation_position: ActivationPosition,
    pub batchnorm: bool,
    pub padding: PaddingMode,
}

impl BlockConfig {
    pub fn new(variant: BlockVariant, channels: usize) -> Self {
        BlockConfig {
            variant,
            in_channels: channels,
            channels,
            expansion: if variant.is_tensor() { 2 } else { 4 },
            weight_shared: true,
            stride: 1,
            activation: None,
            activation_position: ActivationPosition::AfterResidual,
            batchnorm: true,
            padding: PaddingMode::ZeroDirichlet,
        }
    }

    /// Width of the expanded (depthwise output) stream.
    pub fn expanded(&self) -> usize {
        match self.variant {
            BlockVariant::Conservation => 2 * self.in_channels * self.in_channels,
            _ => self.expansion * self.in_channels,
        }
    }

    pub fn needs_shortcut(&self) -> bool {
        self.stride != 1 || self.in_channels != self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.channels == 0 {
            return bad("block channel counts must be positive".into());
        }
        if !(self.stride == 1 || self.stride == 2) {
            return bad(format!("block stride must be 1 or 2, got {}", self.stride));
        }
        if self.variant.is_tensor() {
            if self.expansion != 2 {
                return bad(format!("{} blocks use expansion 2, got {}", self.variant, self.expansion));
            }
            if self.in_channels.max(self.channels) > MAX_TENSOR_CHANNELS {
                return bad(format!(
                    "{} blocks are limited to {MAX_TENSOR_CHANNELS} channels, got {}",
                    self.variant,
                    self.in_channels.max(self.channels)
                ));
            }
        } else if self.expansion < 2 || !self.expansion.is_multiple_of(2) {
            return bad(format!("expansion must be an even number >= 2, got {}", self.expansion));
        }
        if self.variant == BlockVariant::Eq5 && !self.expanded().is_multiple_of(self.channels) {
            return bad(format!(
                "eq5 folds {} expanded channels onto {}; needs divisibility",
                self.expanded(),
                self.channels
            ));
        }
        if let Some(a) = &self.activation {
            a.validate()?;
        }
        Ok(())
    }

    /// Whether the activation is present and not the identity.
    pub fn has_activation(&self) -> bool {
        self.activation.is_some_and(|a| a.kind != ActivationKind::Identity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub variant: BlockVariant,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_depths: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub expansion: usize,
    pub weight_shared: bool,
    pub num_classes: usize,
    pub activation: Activation,
    pub activation_placement: ActivationPlacement,
    pub activation_position: ActivationPosition,
    pub batchnorm: bool,
    pub image_size: usize,
    /// Stride of each of the two stem convolutions.
    pub stem_stride: usize,
    pub padding: PaddingMode,
}

impl NetworkConfig {
    /// The full-size configuration: ResNet-50 stage layout, 100 classes,
    /// softball once per stage.
    pub fn full(variant: BlockVariant) -> Self {
        NetworkConfig {
            variant,
            in_channels: 3,
            stem_channels: 64,
            stage_depths: vec![3, 4, 6, 3],
            stage_channels: vec![64, 128, 256, 512],
            expansion: if variant.is_tensor() { 2 } else { 4 },
            weight_shared: true,
            num_classes: 100,
            activation: Activation::softball(None),
            activation_placement: ActivationPlacement::AtDownsample,
            activation_position: ActivationPosition::AfterResidual,
            batchnorm: true,
            image_size: 224,
            stem_stride: 2,
            padding: PaddingMode::ZeroDirichlet,
        }
    }

    /// A model small enough to train on a laptop CPU.
    pub fn desk(variant: BlockVariant) -> Self {
        NetworkConfig {
            stem_channels: 16,
            stage_depths: vec![2, 2, 2, 2],
            stage_channels: vec![16, 32, 64, 128],
            num_classes: 10,
            image_size: 32,
            stem_stride: 1,
            ..Self::full(variant)
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stage_depths.is_empty() || self.stage_depths.len() != self.stage_channels.len() {
            return bad(format!(
                "stage_depths ({}) and stage_channels ({}) must be nonempty and of equal length",
                self.stage_depths.len(),
                self.stage_channels.len()
            ));
        }
        if self.stage_depths.contains(&0) || self.stage_channels.contains(&0) {
            return bad("every stage needs at least one block and one channel".into());
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.num_classes == 0 || self.image_size == 0 {
            return bad("channel, class and image sizes must be positive".into());
        }
        if self.stem_stride == 0 {
            return bad("stem_stride must be positive".into());
        }
        self.activation.validate()?;
        for b in self.block_configs() {
            b.validate()?;
        }
        Ok(())
    }

    /// Per-block configurations in execution order.
    pub fn block_configs(&self) -> Vec<BlockConfig> {
        let mut out = Vec::new();
        let mut width = self.stem_channels;
        for (s, (&depth, &n)) in self.stage_depths.iter().zip(&self.stage_channels).enumerate() {
            for b in 0..depth {
                let with_act = match self.activation_placement {
                    ActivationPlacement::AtDownsample => b == 0,
                    ActivationPlacement::AllBlocks => true,
                };
                out.push(BlockConfig {
                    variant: self.variant,
                    in_channels: if b == 0 { width } else { n },
                    channels: n,
                    expansion: self.expansion,
                    weight_shared: self.weight_shared,
                    stride: if b == 0 && s > 0 { 2 } else { 1 },
                    activation: with_act.then_some(self.activation),
                    activation_position: self.activation_position,
                    batchnorm: self.batchnorm,
                    padding: self.padding,
                });
            }
            width = n;
        }
        out
    }

    /// `(stage, index within stage)` of every block in execution order.
    pub fn block_positions(&self) -> Vec<(usize, usize)> {
        self.stage_depths
            .iter()
            .enumerate()
            .flat_map(|(s, &d)| (0..d).map(move |b| (s, b)))
            .collect()
    }
}
