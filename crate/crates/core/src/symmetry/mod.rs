//! Channel-mixing symmetries of the weights.
//!
//! A change of stream coordinates `u~ = T u` can be absorbed into the weights
//! so that every prediction is unchanged. The full coefficient tensors admit
//! any invertible `T`; the factored blocks keep their factorization only under
//! permutations and diagonal scalings. Batchnorm, being a per-channel affine
//! map in inference mode, follows permutations and scalings exactly and rules
//! out everything else.

mod law;
mod network;
mod report;
mod sparsify;
mod transform;

pub use law::{antisymmetric_jk, symmetrize_jk, transform_tensor_form, transform_tensor_io};
pub use network::{
    effective_tensors, factorization_degeneracies, naive_transform_block, transform_block, transform_factored_block,
    transform_network,
};
pub use report::{pointwise_weights, sparsity, verify_invariance, SymmetryReport, NEAR_ZERO_REL};
pub use sparsify::{sparsify_search, SparsifyOutcome};
pub use transform::{ChannelTransform, TransformKind, IDENTITY_TOL};
