//! 3x3x3 submanifold convolution: output sites are exactly the input sites,
//! and each output only sees occupied neighbors.

use rayon::prelude::*;

use super::{hash_pattern, Activation, ConvError, ConvKernel};
use crate::tensor::{FeatureMatrix, SparseVoxelTensor, KERNEL_VOLUME_3D, NO_NEIGHBOR};

pub(crate) type NeighborTable = Vec<[u32; KERNEL_VOLUME_3D]>;

/// Pre-activations `bias + sum_offsets W[o]^T x[neighbor]`, offsets summed in
/// slot order.
pub(crate) fn conv3d_pre(features: &FeatureMatrix, table: &NeighborTable, kernel: &ConvKernel) -> FeatureMatrix {
    let c_out = kernel.c_out();
    let mut pre = FeatureMatrix::zeros(table.len(), c_out);
    if c_out == 0 {
        return pre;
    }
    pre.as_mut_slice()
        .par_chunks_mut(c_out)
        .zip(table.par_iter())
        .for_each(|(out, slots)| {
            out.copy_from_slice(&kernel.bias);
            for (o, &j) in slots.iter().enumerate() {
                if j != NO_NEIGHBOR {
                    kernel.accumulate(o, features.row(j as usize), out);
                }
            }
        });
    pre
}

pub(crate) fn activate(pre: &FeatureMatrix, act: Activation) -> FeatureMatrix {
    let mut out = pre.clone();
    out.as_mut_slice().par_iter_mut().for_each(|v| *v = act.apply(*v));
    out
}

/// Apply the activation derivative to an upstream gradient.
pub(crate) fn pre_gradient(grad_out: &FeatureMatrix, pre: &FeatureMatrix, act: Activation) -> FeatureMatrix {
    let mut d = grad_out.clone();
    d.as_mut_slice()
        .par_iter_mut()
        .zip(pre.as_slice().par_iter())
        .for_each(|(g, &p)| *g *= act.derivative(p));
    d
}

/// Submanifold 3D convolution as a pure function.
pub fn submanifold_conv3d(
    input: &SparseVoxelTensor,
    kernel: &ConvKernel,
    act: Activation,
) -> Result<SparseVoxelTensor, ConvError> {
    check_kernel(kernel)?;
    kernel.check_input_width(input.width())?;
    let table = input.neighbor_table();
    let pre = conv3d_pre(input.features(), &table, kernel);
    Ok(input.with_features(activate(&pre, act))?)
}

fn check_kernel(kernel: &ConvKernel) -> Result<(), ConvError> {
    if kernel.offsets() != KERNEL_VOLUME_3D {
        return Err(ConvError::KernelOffsets {
            expected: KERNEL_VOLUME_3D,
            found: kernel.offsets(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub(crate) struct Conv3dCache {
    pub input: FeatureMatrix,
    pub table: NeighborTable,
    pub pre: FeatureMatrix,
}

/// Accumulate weight/bias gradients and return the input gradient.
pub(crate) fn conv3d_backward(
    cache: &Conv3dCache,
    kernel: &mut ConvKernel,
    act: Activation,
    grad_out: &FeatureMatrix,
) -> Result<FeatureMatrix, ConvError> {
    if grad_out.rows() != cache.pre.rows() || grad_out.cols() != kernel.c_out() {
        return Err(ConvError::GradShape {
            expected: (cache.pre.rows(), kernel.c_out()),
            found: (grad_out.rows(), grad_out.cols()),
        });
    }
    kernel.ensure_grad_buffers();
    let dpre = pre_gradient(grad_out, &cache.pre, act);
    let (c_in, c_out) = (kernel.c_in(), kernel.c_out());
    let n = cache.table.len();

    for i in 0..n {
        for (b, g) in kernel.grad_bias.iter_mut().zip(dpre.row(i)) {
            *b += g;
        }
    }

    // dW[o] = sum_i x[nb(i, o)] (outer) dpre[i], one task per offset, rows in order.
    let table = &cache.table;
    let input = &cache.input;
    kernel
        .grad_weight
        .par_chunks_mut(c_in * c_out)
        .enumerate()
        .for_each(|(o, gw)| {
            for i in 0..n {
                let j = table[i][o];
                if j == NO_NEIGHBOR {
                    continue;
                }
                let x = input.row(j as usize);
                let d = dpre.row(i);
                for (ci, &xv) in x.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (g, &dv) in gw[ci * c_out..(ci + 1) * c_out].iter_mut().zip(d) {
                        *g += xv * dv;
                    }
                }
            }
        });

    // Neighborhood is symmetric: j sees i at offset o  <=>  i sees j at 26 - o.
    let mut grad_in = FeatureMatrix::zeros(n, c_in);
    if c_in > 0 {
        let k: &ConvKernel = kernel;
        grad_in
            .as_mut_slice()
            .par_chunks_mut(c_in)
            .enumerate()
            .for_each(|(j, gx)| {
                for o in 0..KERNEL_VOLUME_3D {
                    let i = table[j][KERNEL_VOLUME_3D - 1 - o];
                    if i != NO_NEIGHBOR {
                        k.accumulate_transpose(o, dpre.row(i as usize), gx);
                    }
                }
            });
    }
    Ok(grad_in)
}

/// Submanifold 3D convolution layer that keeps what backward needs.
#[derive(Debug, Clone)]
pub struct SubmanifoldConv3d {
    pub kernel: ConvKernel,
    pub act: Activation,
    cache: Option<Conv3dCache>,
}

impl SubmanifoldConv3d {
    pub fn new(kernel: ConvKernel, act: Activation) -> Result<Self, ConvError> {
        check_kernel(&kernel)?;
        act.validate()?;
        Ok(Self {
            kernel,
            act,
            cache: None,
        })
    }

    pub fn forward(&mut self, input: &SparseVoxelTensor) -> Result<SparseVoxelTensor, ConvError> {
        self.kernel.check_input_width(input.width())?;
        let table = input.neighbor_table();
        let pre = conv3d_pre(input.features(), &table, &self.kernel);
        let out = input.with_features(activate(&pre, self.act))?;
        self.cache = Some(Conv3dCache {
            input: input.features().clone(),
            table,
            pre,
        });
        Ok(out)
    }

    /// Gradient w.r.t. the last forward input; weight gradients accumulate
    /// into the kernel's buffers.
    pub fn backward(&mut self, grad_out: &FeatureMatrix) -> Result<FeatureMatrix, ConvError> {
        let cache = self.cache.as_ref().ok_or(ConvError::BackwardBeforeForward)?;
        conv3d_backward(cache, &mut self.kernel, self.act, grad_out)
    }

    /// Fingerprint of the activation pattern of the last forward pass.
    pub fn piecewise_signature(&self) -> u64 {
        self.cache
            .as_ref()
            .map_or(0, |c| hash_pattern(c.pre.as_slice().iter().map(|&p| u64::from(p > 0.0))))
    }
}
