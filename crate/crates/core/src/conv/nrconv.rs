//! Noise-resistant submanifold convolution: a 3D-neighborhood branch and an
//! image-plane branch, each producing half of the output channels, joined
//! per voxel as `[3D, 2D]`.

use serde::{Deserialize, Serialize};

use super::branch2d::{branch2d_backward, branch2d_forward, signature, Branch2dCache, KERNEL_AREA_2D};
use super::subm3d::{activate, conv3d_backward, conv3d_pre, Conv3dCache};
use super::{hash_pattern, Activation, ConvError, ConvKernel};
use crate::geometry::PixelCell;
use crate::rng::SeededRng;
use crate::tensor::{FeatureMatrix, SparseVoxelTensor, KERNEL_VOLUME_3D};

/// Parameters of both branches. Each maps `c_in` to `c_out / 2` channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NrConvWeights {
    pub k3d: ConvKernel,
    pub k2d: ConvKernel,
}

impl NrConvWeights {
    pub fn zeros(c_in: usize, c_out: usize) -> Result<Self, ConvError> {
        let half = half_width(c_out)?;
        Ok(Self {
            k3d: ConvKernel::zeros(KERNEL_VOLUME_3D, c_in, half),
            k2d: ConvKernel::zeros(KERNEL_AREA_2D, c_in, half),
        })
    }

    pub fn glorot(c_in: usize, c_out: usize, rng: &mut SeededRng) -> Result<Self, ConvError> {
        let half = half_width(c_out)?;
        Ok(Self {
            k3d: ConvKernel::glorot(KERNEL_VOLUME_3D, c_in, half, rng),
            k2d: ConvKernel::glorot(KERNEL_AREA_2D, c_in, half, rng),
        })
    }

    pub fn validate(&self) -> Result<(), ConvError> {
        if self.k3d.offsets() != KERNEL_VOLUME_3D || self.k2d.offsets() != KERNEL_AREA_2D {
            return Err(ConvError::KernelOffsets {
                expected: KERNEL_VOLUME_3D,
                found: self.k3d.offsets(),
            });
        }
        if self.k3d.c_in() != self.k2d.c_in() || self.k3d.c_out() != self.k2d.c_out() {
            return Err(ConvError::BranchMismatch);
        }
        Ok(())
    }

    pub fn c_in(&self) -> usize {
        self.k3d.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.k3d.c_out() * 2
    }

    pub fn zero_grad(&mut self) {
        self.k3d.zero_grad();
        self.k2d.zero_grad();
    }
}

fn half_width(c_out: usize) -> Result<usize, ConvError> {
    if c_out == 0 || c_out % 2 != 0 {
        return Err(ConvError::OddWidth(c_out));
    }
    Ok(c_out / 2)
}

/// NRConv as a pure function. Output sites and provenance equal the input's.
pub fn nrconv(
    input: &SparseVoxelTensor,
    h2d: &[Option<PixelCell>],
    weights: &NrConvWeights,
    act: Activation,
) -> Result<SparseVoxelTensor, ConvError> {
    weights.validate()?;
    weights.k3d.check_input_width(input.width())?;
    let table = input.neighbor_table();
    let x3 = activate(&conv3d_pre(input.features(), &table, &weights.k3d), act);
    let (x2, _) = branch2d_forward(input.features(), h2d, &weights.k2d, act)?;
    Ok(input.with_features(x3.hconcat(&x2)?)?)
}

#[derive(Debug, Clone)]
struct NrConvCache {
    c3: Conv3dCache,
    c2: Branch2dCache,
}

/// NRConv layer that keeps what backward needs.
#[derive(Debug, Clone)]
pub struct NrConv {
    pub weights: NrConvWeights,
    pub act: Activation,
    cache: Option<NrConvCache>,
}

impl NrConv {
    pub fn new(weights: NrConvWeights, act: Activation) -> Result<Self, ConvError> {
        weights.validate()?;
        act.validate()?;
        Ok(Self {
            weights,
            act,
            cache: None,
        })
    }

    pub fn forward(
        &mut self,
        input: &SparseVoxelTensor,
        h2d: &[Option<PixelCell>],
    ) -> Result<SparseVoxelTensor, ConvError> {
        self.weights.k3d.check_input_width(input.width())?;
        let table = input.neighbor_table();
        let pre3 = conv3d_pre(input.features(), &table, &self.weights.k3d);
        let x3 = activate(&pre3, self.act);
        let (x2, c2) = branch2d_forward(input.features(), h2d, &self.weights.k2d, self.act)?;
        let out = input.with_features(x3.hconcat(&x2)?)?;
        self.cache = Some(NrConvCache {
            c3: Conv3dCache {
                input: input.features().clone(),
                table,
                pre: pre3,
            },
            c2,
        });
        Ok(out)
    }

    /// Splits the upstream gradient at column `c_out / 2` and sums the two
    /// branches' input gradients.
    pub fn backward(&mut self, grad_out: &FeatureMatrix) -> Result<FeatureMatrix, ConvError> {
        let cache = self.cache.as_ref().ok_or(ConvError::BackwardBeforeForward)?;
        if grad_out.cols() != self.weights.c_out() {
            return Err(ConvError::GradShape {
                expected: (cache.c3.pre.rows(), self.weights.c_out()),
                found: (grad_out.rows(), grad_out.cols()),
            });
        }
        let (g3, g2) = grad_out.split_cols(self.weights.k3d.c_out());
        let mut gx = conv3d_backward(&cache.c3, &mut self.weights.k3d, self.act, &g3)?;
        let gx2 = branch2d_backward(&cache.c2, &mut self.weights.k2d, self.act, &g2)?;
        for (a, b) in gx.as_mut_slice().iter_mut().zip(gx2.as_slice()) {
            *a += b;
        }
        Ok(gx)
    }

    pub fn piecewise_signature(&self) -> u64 {
        self.cache.as_ref().map_or(0, |c| {
            hash_pattern(
                c.c3.pre
                    .as_slice()
                    .iter()
                    .map(|&p| u64::from(p > 0.0))
                    .chain(std::iter::once(signature(&c.c2, &self.weights.k2d.bias))),
            )
        })
    }
}
