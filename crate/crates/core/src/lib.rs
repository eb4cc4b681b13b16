//! Quasi-linear hyperbolic convolutional networks.
//!
//! Each residual block is one explicit Euler step of a first-order PDE system
//! `u_t = A(u) u_x + B(u) u_y` whose coefficient matrices depend linearly on
//! `u`. Because the nonlinearity lives in the product of two branches rather
//! than in an activation, the weights admit a continuous group of channel
//! transformations that leave predictions unchanged.
//!
//! Modules, bottom up:
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! - [`nn`]: convolution, batch normalization, activations, head.
//! - [`blocks`]: the block variants and network assembly.
//! - [`symmetry`]: channel transforms of the weights and invariance checks.
//! - [`pde`]: finite-difference solvers used as independent oracles.
//! - [`training`]: SGD with warmup and cosine decay, NaN guard, checkpoints.

pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod nn;
pub mod pde;
pub mod symmetry;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use blocks::{BlockConfig, BlockVariant, Model, NetworkConfig};
pub use error::{Error, Result};
pub use pde::PdeGrid;
pub use symmetry::{ChannelTransform, TransformKind};
pub use tensor::Tensor;
pub use training::{Dataset, TrainConfig};
