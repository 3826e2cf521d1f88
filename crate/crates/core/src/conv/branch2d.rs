//! The image-plane branch: voxels are grouped by projected pixel cell, each
//! cell is max-pooled to one feature, a 3x3 submanifold convolution runs over
//! the occupied cells, and every voxel receives its cell's output.

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use super::subm3d::pre_gradient;
use super::{hash_pattern, Activation, ConvError, ConvKernel};
use crate::geometry::PixelCell;
use crate::tensor::{FeatureMatrix, SparseVoxelTensor, NO_NEIGHBOR};

pub const KERNEL_AREA_2D: usize = 9;
pub const CENTER_OFFSET_2D: usize = 4;

/// `(du, dv)` of a 2D kernel slot; slots run lexicographically over (dv, du).
pub const fn offset_2d(slot: usize) -> (i32, i32) {
    let s = slot as i32;
    (s % 3 - 1, s / 3 - 1)
}

/// Voxel-to-cell grouping with max-pooled cell features.
#[derive(Debug, Clone)]
pub(crate) struct CellPooling {
    /// Cell of each voxel row, or `NO_NEIGHBOR` for unprojected voxels.
    pub cell_of_row: Vec<u32>,
    /// Occupied cells in order of first appearance.
    pub cells: Vec<PixelCell>,
    pub members: Vec<Vec<u32>>,
    pub pooled: FeatureMatrix,
    /// Source row of each pooled value, `[cell][channel]`.
    pub argmax: Vec<u32>,
    pub table: Vec<[u32; KERNEL_AREA_2D]>,
}

impl CellPooling {
    pub fn new(features: &FeatureMatrix, h2d: &[Option<PixelCell>]) -> Self {
        let c = features.cols();
        let mut lookup: FxHashMap<PixelCell, u32> = FxHashMap::default();
        let mut cells = Vec::new();
        let mut members: Vec<Vec<u32>> = Vec::new();
        let mut cell_of_row = vec![NO_NEIGHBOR; h2d.len()];
        for (row, cell) in h2d.iter().enumerate() {
            let Some(cell) = *cell else { continue };
            let id = *lookup.entry(cell).or_insert_with(|| {
                cells.push(cell);
                members.push(Vec::new());
                (cells.len() - 1) as u32
            });
            members[id as usize].push(row as u32);
            cell_of_row[row] = id;
        }

        // Rows are visited in ascending order and only a strictly larger value
        // replaces the running max, so ties resolve to the lowest row.
        let mut pooled = FeatureMatrix::zeros(cells.len(), c);
        let mut argmax = vec![0u32; cells.len() * c];
        for (id, rows) in members.iter().enumerate() {
            let first = rows[0];
            pooled.row_mut(id).copy_from_slice(features.row(first as usize));
            argmax[id * c..(id + 1) * c].fill(first);
            for &r in &rows[1..] {
                let x = features.row(r as usize);
                let p = pooled.row_mut(id);
                for ch in 0..c {
                    if x[ch] > p[ch] {
                        p[ch] = x[ch];
                        argmax[id * c + ch] = r;
                    }
                }
            }
        }

        let table = cells
            .par_iter()
            .map(|cell| {
                let mut slots = [NO_NEIGHBOR; KERNEL_AREA_2D];
                for (s, slot) in slots.iter_mut().enumerate() {
                    let (du, dv) = offset_2d(s);
                    if let Some(&id) = lookup.get(&PixelCell::new(cell.u + du, cell.v + dv)) {
                        *slot = id;
                    }
                }
                slots
            })
            .collect();

        Self {
            cell_of_row,
            cells,
            members,
            pooled,
            argmax,
            table,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Branch2dCache {
    pub pooling: CellPooling,
    pub rows: usize,
    pub c_in: usize,
    /// Pre-activations per occupied cell.
    pub pre: FeatureMatrix,
}

fn check_kernel(kernel: &ConvKernel) -> Result<(), ConvError> {
    if kernel.offsets() != KERNEL_AREA_2D {
        return Err(ConvError::KernelOffsets {
            expected: KERNEL_AREA_2D,
            found: kernel.offsets(),
        });
    }
    Ok(())
}

pub(crate) fn branch2d_forward(
    features: &FeatureMatrix,
    h2d: &[Option<PixelCell>],
    kernel: &ConvKernel,
    act: Activation,
) -> Result<(FeatureMatrix, Branch2dCache), ConvError> {
    check_kernel(kernel)?;
    kernel.check_input_width(features.cols())?;
    if h2d.len() != features.rows() {
        return Err(ConvError::ProjectionRows {
            expected: features.rows(),
            found: h2d.len(),
        });
    }
    let pooling = CellPooling::new(features, h2d);
    let c_out = kernel.c_out();
    let mut pre = FeatureMatrix::zeros(pooling.cells.len(), c_out);
    if c_out > 0 {
        pre.as_mut_slice()
            .par_chunks_mut(c_out)
            .zip(pooling.table.par_iter())
            .for_each(|(out, slots)| {
                out.copy_from_slice(&kernel.bias);
                for (s, &nb) in slots.iter().enumerate() {
                    if nb != NO_NEIGHBOR {
                        kernel.accumulate(s, pooling.pooled.row(nb as usize), out);
                    }
                }
            });
    }

    let empty: Vec<f64> = kernel.bias.iter().map(|&b| act.apply(b)).collect();
    let mut out = FeatureMatrix::zeros(features.rows(), c_out);
    for (row, &cell) in pooling.cell_of_row.iter().enumerate() {
        let dst = out.row_mut(row);
        if cell == NO_NEIGHBOR {
            dst.copy_from_slice(&empty);
        } else {
            for (d, &p) in dst.iter_mut().zip(pre.row(cell as usize)) {
                *d = act.apply(p);
            }
        }
    }
    let cache = Branch2dCache {
        pooling,
        rows: features.rows(),
        c_in: features.cols(),
        pre,
    };
    Ok((out, cache))
}

pub(crate) fn branch2d_backward(
    cache: &Branch2dCache,
    kernel: &mut ConvKernel,
    act: Activation,
    grad_out: &FeatureMatrix,
) -> Result<FeatureMatrix, ConvError> {
    let c_out = kernel.c_out();
    let c_in = cache.c_in;
    if grad_out.rows() != cache.rows || grad_out.cols() != c_out {
        return Err(ConvError::GradShape {
            expected: (cache.rows, c_out),
            found: (grad_out.rows(), grad_out.cols()),
        });
    }
    kernel.ensure_grad_buffers();
    let pool = &cache.pooling;
    let n_cells = pool.cells.len();

    // Voxels sharing a cell share its output, so their gradients add up.
    let mut grad_cells = FeatureMatrix::zeros(n_cells, c_out);
    for (id, rows) in pool.members.iter().enumerate() {
        let g = grad_cells.row_mut(id);
        for &r in rows {
            for (a, &b) in g.iter_mut().zip(grad_out.row(r as usize)) {
                *a += b;
            }
        }
    }
    let dpre = pre_gradient(&grad_cells, &cache.pre, act);

    for id in 0..n_cells {
        for (b, g) in kernel.grad_bias.iter_mut().zip(dpre.row(id)) {
            *b += g;
        }
    }
    // unprojected voxels output act(bias)
    let bias_slope: Vec<f64> = kernel.bias.iter().map(|&b| act.derivative(b)).collect();
    for (row, &cell) in pool.cell_of_row.iter().enumerate() {
        if cell == NO_NEIGHBOR {
            for ((b, &g), &slope) in kernel.grad_bias.iter_mut().zip(grad_out.row(row)).zip(&bias_slope) {
                *b += g * slope;
            }
        }
    }

    let table = &pool.table;
    let pooled = &pool.pooled;
    kernel
        .grad_weight
        .par_chunks_mut(c_in * c_out)
        .enumerate()
        .for_each(|(s, gw)| {
            for id in 0..n_cells {
                let nb = table[id][s];
                if nb == NO_NEIGHBOR {
                    continue;
                }
                let x = pooled.row(nb as usize);
                let d = dpre.row(id);
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
    let mut grad_pooled = FeatureMatrix::zeros(n_cells, c_in);
    if c_in > 0 {
        grad_pooled
            .as_mut_slice()
            .par_chunks_mut(c_in)
            .enumerate()
            .for_each(|(id, gp)| {
                for s in 0..KERNEL_AREA_2D {
                    let other = table[id][KERNEL_AREA_2D - 1 - s];
                    if other != NO_NEIGHBOR {
                        k.accumulate_transpose(s, dpre.row(other as usize), gp);
                    }
                }
            });
    }

    // Max-pool subgradient: each pooled channel routes to its argmax row only.
    let mut grad_in = FeatureMatrix::zeros(cache.rows, c_in);
    for id in 0..n_cells {
        let gp = grad_pooled.row(id);
        for ch in 0..c_in {
            let r = pool.argmax[id * c_in + ch] as usize;
            grad_in.row_mut(r)[ch] += gp[ch];
        }
    }
    Ok(grad_in)
}

/// 2D branch as a pure function: an `N x c_out` feature matrix.
pub fn conv2d_branch(
    input: &SparseVoxelTensor,
    h2d: &[Option<PixelCell>],
    kernel: &ConvKernel,
    act: Activation,
) -> Result<FeatureMatrix, ConvError> {
    branch2d_forward(input.features(), h2d, kernel, act).map(|(out, _)| out)
}

/// 2D branch layer that keeps what backward needs.
#[derive(Debug, Clone)]
pub struct Conv2dBranch {
    pub kernel: ConvKernel,
    pub act: Activation,
    cache: Option<Branch2dCache>,
}

impl Conv2dBranch {
    pub fn new(kernel: ConvKernel, act: Activation) -> Result<Self, ConvError> {
        check_kernel(&kernel)?;
        act.validate()?;
        Ok(Self {
            kernel,
            act,
            cache: None,
        })
    }

    pub fn forward(&mut self, input: &SparseVoxelTensor, h2d: &[Option<PixelCell>]) -> Result<FeatureMatrix, ConvError> {
        let (out, cache) = branch2d_forward(input.features(), h2d, &self.kernel, self.act)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMatrix) -> Result<FeatureMatrix, ConvError> {
        let cache = self.cache.as_ref().ok_or(ConvError::BackwardBeforeForward)?;
        branch2d_backward(cache, &mut self.kernel, self.act, grad_out)
    }

    /// Fingerprint of activation signs and max-pool routing of the last
    /// forward pass.
    pub fn piecewise_signature(&self) -> u64 {
        self.cache.as_ref().map_or(0, |c| signature(c, &self.kernel.bias))
    }
}

pub(crate) fn signature(c: &Branch2dCache, bias: &[f64]) -> u64 {
    hash_pattern(
        c.pre
            .as_slice()
            .iter()
            .chain(bias)
            .map(|&p| u64::from(p > 0.0))
            .chain(c.pooling.argmax.iter().map(|&a| u64::from(a))),
    )
}
