//! Sparse convolutions over [`SparseVoxelTensor`](crate::SparseVoxelTensor):
//! submanifold 3D, the image-plane 2D branch, NRConv, and strided
//! downsampling, each with a pure forward function and a layer type that
//! supports backward.

mod branch2d;
mod downsample;
pub mod gradcheck;
mod kernel;
mod nrconv;
mod subm3d;

use std::hash::Hasher;

use rustc_hash::FxHasher;
use thiserror::Error;

use crate::tensor::TensorError;

pub use branch2d::{conv2d_branch, offset_2d, Conv2dBranch, CENTER_OFFSET_2D, KERNEL_AREA_2D};
pub use downsample::{spconv_downsample, SpconvDownsample};
pub use kernel::{Activation, ConvKernel};
pub use nrconv::{nrconv, NrConv, NrConvWeights};
pub use subm3d::{submanifold_conv3d, SubmanifoldConv3d};

#[derive(Debug, Error)]
pub enum ConvError {
    #[error("kernel has {found} offsets, expected {expected}")]
    KernelOffsets { expected: usize, found: usize },
    #[error("input feature width {found} does not match kernel input width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("kernel shape {expected:?} needs matching buffers, got {weights} weights and {bias} biases")]
    KernelShape {
        expected: (usize, usize, usize),
        weights: usize,
        bias: usize,
    },
    #[error("kernel parameters must be finite")]
    NonFiniteParameter,
    #[error("leaky relu slope {0} outside (0, 1)")]
    InvalidActivation(f64),
    #[error("output width {0} must be a positive even number")]
    OddWidth(usize),
    #[error("3D and 2D branch kernels disagree on channel widths")]
    BranchMismatch,
    #[error("projection has {found} rows for {expected} voxels")]
    ProjectionRows { expected: usize, found: usize },
    #[error("gradient shape {found:?} does not match output shape {expected:?}")]
    GradShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Order-sensitive fingerprint of a sequence, used to detect whether a
/// perturbation moved a piecewise-linear function across a kink.
pub(crate) fn hash_pattern<I: IntoIterator<Item = u64>>(items: I) -> u64 {
    let mut h = FxHasher::default();
    let mut n = 0u64;
    for v in items {
        h.write_u64(v);
        n += 1;
    }
    h.write_u64(n);
    h.finish()
}
