//! Strided sparse convolution (kernel 3, stride 2, padding 1) halving
//! resolution. Output sites are the distinct floor-halved input sites; each
//! gathers every input inside its 3x3x3 receptive field `2p + d`,
//! `d in {-1, 0, 1}^3`.

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use super::subm3d::{activate, pre_gradient};
use super::{hash_pattern, Activation, ConvError, ConvKernel};
use crate::tensor::{
    offsets_3d, FeatureMatrix, SparseVoxelTensor, VoxelIndex, KERNEL_VOLUME_3D, NO_NEIGHBOR,
};

#[derive(Debug, Clone)]
struct Rulebook {
    /// `[out_row][slot]` -> input row.
    gather: Vec<[u32; KERNEL_VOLUME_3D]>,
    /// Per input row, the `(slot, out_row)` pairs it feeds, ordered by output.
    scatter: Vec<Vec<(u8, u32)>>,
}

fn build_output(input: &SparseVoxelTensor) -> Result<(SparseVoxelTensor, Rulebook), ConvError> {
    let mut out_idx: Vec<VoxelIndex> = input.indices().iter().map(|i| i.halved()).collect();
    out_idx.sort_unstable();
    out_idx.dedup();
    let spec = input.spec().downsampled();

    let gather: Vec<[u32; KERNEL_VOLUME_3D]> = out_idx
        .par_iter()
        .map(|&p| {
            let mut slots = [NO_NEIGHBOR; KERNEL_VOLUME_3D];
            let base = VoxelIndex::new(2 * p.x, 2 * p.y, 2 * p.z);
            for (s, o) in offsets_3d().enumerate() {
                if let Some(r) = input.find(base.offset(o)) {
                    slots[s] = r as u32;
                }
            }
            slots
        })
        .collect();

    let mut scatter = vec![Vec::new(); input.len()];
    for (p, slots) in gather.iter().enumerate() {
        for (s, &r) in slots.iter().enumerate() {
            if r != NO_NEIGHBOR {
                scatter[r as usize].push((s as u8, p as u32));
            }
        }
    }

    let origins = input.origins().map(|flags| {
        let pos: FxHashMap<VoxelIndex, usize> = out_idx.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut merged: Vec<Option<crate::tensor::VoxelOrigin>> = vec![None; out_idx.len()];
        for (row, idx) in input.indices().iter().enumerate() {
            let slot = &mut merged[pos[&idx.halved()]];
            *slot = Some(slot.map_or(flags[row], |m| m.merge(flags[row])));
        }
        merged.into_iter().map(|m| m.expect("every output has a child")).collect::<Vec<_>>()
    });

    let n = out_idx.len();
    let mut out = SparseVoxelTensor::build(out_idx, FeatureMatrix::zeros(n, 0), spec)?;
    if let Some(o) = origins {
        out = out.with_origins(o)?;
    }
    Ok((out, Rulebook { gather, scatter }))
}

fn forward_pre(features: &FeatureMatrix, rb: &Rulebook, kernel: &ConvKernel) -> FeatureMatrix {
    let c_out = kernel.c_out();
    let mut pre = FeatureMatrix::zeros(rb.gather.len(), c_out);
    if c_out > 0 {
        pre.as_mut_slice()
            .par_chunks_mut(c_out)
            .zip(rb.gather.par_iter())
            .for_each(|(out, slots)| {
                out.copy_from_slice(&kernel.bias);
                for (s, &r) in slots.iter().enumerate() {
                    if r != NO_NEIGHBOR {
                        kernel.accumulate(s, features.row(r as usize), out);
                    }
                }
            });
    }
    pre
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

/// Downsampling convolution as a pure function; the result lives on the
/// next stride level.
pub fn spconv_downsample(
    input: &SparseVoxelTensor,
    kernel: &ConvKernel,
    act: Activation,
) -> Result<SparseVoxelTensor, ConvError> {
    check_kernel(kernel)?;
    kernel.check_input_width(input.width())?;
    let (shell, rb) = build_output(input)?;
    let pre = forward_pre(input.features(), &rb, kernel);
    Ok(shell.with_features(activate(&pre, act))?)
}

#[derive(Debug, Clone)]
struct DownCache {
    input: FeatureMatrix,
    rb: Rulebook,
    pre: FeatureMatrix,
}

#[derive(Debug, Clone)]
pub struct SpconvDownsample {
    pub kernel: ConvKernel,
    pub act: Activation,
    cache: Option<DownCache>,
}

impl SpconvDownsample {
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
        let (shell, rb) = build_output(input)?;
        let pre = forward_pre(input.features(), &rb, &self.kernel);
        let out = shell.with_features(activate(&pre, self.act))?;
        self.cache = Some(DownCache {
            input: input.features().clone(),
            rb,
            pre,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMatrix) -> Result<FeatureMatrix, ConvError> {
        let cache = self.cache.as_ref().ok_or(ConvError::BackwardBeforeForward)?;
        let kernel = &mut self.kernel;
        let (c_in, c_out) = (kernel.c_in(), kernel.c_out());
        if grad_out.rows() != cache.pre.rows() || grad_out.cols() != c_out {
            return Err(ConvError::GradShape {
                expected: (cache.pre.rows(), c_out),
                found: (grad_out.rows(), grad_out.cols()),
            });
        }
        kernel.ensure_grad_buffers();
        let dpre = pre_gradient(grad_out, &cache.pre, self.act);
        for p in 0..dpre.rows() {
            for (b, g) in kernel.grad_bias.iter_mut().zip(dpre.row(p)) {
                *b += g;
            }
        }
        let gather = &cache.rb.gather;
        let input = &cache.input;
        kernel
            .grad_weight
            .par_chunks_mut(c_in * c_out)
            .enumerate()
            .for_each(|(s, gw)| {
                for (p, slots) in gather.iter().enumerate() {
                    let r = slots[s];
                    if r == NO_NEIGHBOR {
                        continue;
                    }
                    let x = input.row(r as usize);
                    let d = dpre.row(p);
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
        let k: &ConvKernel = kernel;
        let mut grad_in = FeatureMatrix::zeros(input.rows(), c_in);
        if c_in > 0 {
            grad_in
                .as_mut_slice()
                .par_chunks_mut(c_in)
                .zip(cache.rb.scatter.par_iter())
                .for_each(|(gx, uses)| {
                    for &(s, p) in uses {
                        k.accumulate_transpose(s as usize, dpre.row(p as usize), gx);
                    }
                });
        }
        Ok(grad_in)
    }

    pub fn piecewise_signature(&self) -> u64 {
        self.cache
            .as_ref()
            .map_or(0, |c| hash_pattern(c.pre.as_slice().iter().map(|&p| u64::from(p > 0.0))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{VoxelGridSpec, VoxelOrigin, CENTER_OFFSET_3D};

    fn spec() -> VoxelGridSpec {
        VoxelGridSpec::new([0.0; 3], [0.05, 0.05, 0.1], [16, 16, 16]).unwrap()
    }

    #[test]
    fn single_voxel_halves_its_index() {
        let t = SparseVoxelTensor::build(vec![VoxelIndex::new(3, 5, 7)], FeatureMatrix::zeros(1, 2), spec()).unwrap();
        let out = spconv_downsample(&t, &ConvKernel::zeros(27, 2, 4), Activation::Relu).unwrap();
        assert_eq!(out.indices(), &[VoxelIndex::new(1, 2, 3)]);
        assert_eq!(out.width(), 4);
        assert_eq!(out.spec().stride_level, 2);
        assert_eq!(out.spec().extent, [8, 8, 8]);
    }

    #[test]
    fn block_at_origin_collapses_to_one_voxel() {
        let mut idx = Vec::new();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    idx.push(VoxelIndex::new(x, y, z));
                }
            }
        }
        let flags = (0..8).map(|i| if i == 0 { VoxelOrigin::Lidar } else { VoxelOrigin::Virtual }).collect();
        let t = SparseVoxelTensor::build(idx, FeatureMatrix::new(8, 1, vec![1.0; 8]).unwrap(), spec())
            .unwrap()
            .with_origins(flags)
            .unwrap();
        // all-ones kernel sums the receptive field
        let k = ConvKernel::from_parts(27, 1, 1, vec![1.0; 27], vec![0.0]).unwrap();
        let out = spconv_downsample(&t, &k, Activation::Identity).unwrap();
        assert_eq!(out.indices(), &[VoxelIndex::new(0, 0, 0)]);
        // receptive field of (0,0,0) is {-1,0,1}^3: covers 8 of the block
        assert_eq!(out.feature_row(0), &[8.0]);
        assert_eq!(out.origins().unwrap(), &[VoxelOrigin::Mixed]);
    }

    #[test]
    fn odd_neighbor_contributes_to_next_output() {
        // (1,0,0) halves to (0,0,0) but also lies at 2*(1,0,0) - 1 of output (1,0,0)
        let idx = vec![VoxelIndex::new(1, 0, 0), VoxelIndex::new(2, 0, 0)];
        let t = SparseVoxelTensor::build(idx, FeatureMatrix::new(2, 1, vec![1.0, 10.0]).unwrap(), spec()).unwrap();
        let k = ConvKernel::from_parts(27, 1, 1, vec![1.0; 27], vec![0.0]).unwrap();
        let out = spconv_downsample(&t, &k, Activation::Identity).unwrap();
        assert_eq!(out.indices(), &[VoxelIndex::new(0, 0, 0), VoxelIndex::new(1, 0, 0)]);
        assert_eq!(out.feature_row(0), &[1.0]);
        assert_eq!(out.feature_row(1), &[11.0]);
        let _ = CENTER_OFFSET_3D;
    }
}
