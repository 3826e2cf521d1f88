//! Stochastic voxel discard.
//!
//! *Input* discard stratifies voxels into uniform planar-distance bins and
//! caps every nearby bin at a fixed voxel count while keeping distant bins
//! whole. *Layer* discard drops a fixed fraction of voxels uniformly at
//! random, during training only. Random and farthest-point sampling are kept
//! here as comparison baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::tensor::{SparseVoxelTensor, VoxelOrigin};

#[derive(Debug, Error, PartialEq)]
pub enum StvdError {
    #[error("virtual-only discard needs per-voxel origin flags, but the tensor has none")]
    MissingOriginFlags,
    #[error("input discard expects a stride-1 tensor, got stride {0}")]
    NotInputLevel(u32),
    #[error("invalid discard configuration: {0}")]
    InvalidConfig(String),
}

/// Which voxels are subject to discard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StvdMode {
    AllVoxels,
    /// LiDAR-origin voxels bypass discard; virtual and mixed voxels are eligible.
    VirtualOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StvdConfig {
    pub num_bins: usize,
    /// Bins whose centre lies at or below this planar distance are capped.
    pub nearby_limit: f64,
    pub keep_per_nearby_bin: usize,
    /// Span `[0, bin_range]` covered by the uniform bins; farther voxels fall
    /// in an overflow bin that is always kept.
    pub bin_range: f64,
    pub layer_discard_rate: f64,
    /// `None` picks `VirtualOnly` when the tensor carries origin flags and
    /// `AllVoxels` otherwise.
    pub mode: Option<StvdMode>,
}

impl Default for StvdConfig {
    fn default() -> Self {
        Self {
            num_bins: 10,
            nearby_limit: 30.0,
            keep_per_nearby_bin: 1000,
            bin_range: 100.0,
            layer_discard_rate: 0.15,
            mode: None,
        }
    }
}

impl StvdConfig {
    pub fn validate(&self) -> Result<(), StvdError> {
        let bad = |m: String| Err(StvdError::InvalidConfig(m));
        if self.num_bins == 0 {
            return bad("num_bins must be positive".into());
        }
        if !(self.bin_range > 0.0) || !self.bin_range.is_finite() {
            return bad(format!("bin_range {} must be positive", self.bin_range));
        }
        if !(self.nearby_limit >= 0.0 && self.nearby_limit <= self.bin_range) {
            return bad(format!(
                "nearby_limit {} must lie in [0, bin_range = {}]",
                self.nearby_limit, self.bin_range
            ));
        }
        if self.keep_per_nearby_bin == 0 {
            return bad("keep_per_nearby_bin must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.layer_discard_rate) {
            return bad(format!("layer discard rate {} outside [0, 1)", self.layer_discard_rate));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_range / self.num_bins as f64
    }

    /// Bin of a planar distance; `num_bins` is the overflow bin.
    pub fn bin_of(&self, distance: f64) -> usize {
        if !(distance < self.bin_range) {
            return self.num_bins;
        }
        ((distance / self.bin_width()).floor() as usize).min(self.num_bins - 1)
    }

    /// `[lo, hi)` of a bin in metres; the overflow bin ends at infinity.
    pub fn bin_bounds(&self, bin: usize) -> (f64, f64) {
        if bin >= self.num_bins {
            (self.bin_range, f64::INFINITY)
        } else {
            let w = self.bin_width();
            (bin as f64 * w, (bin + 1) as f64 * w)
        }
    }

    pub fn is_nearby(&self, bin: usize) -> bool {
        if bin >= self.num_bins {
            return false;
        }
        let (lo, hi) = self.bin_bounds(bin);
        0.5 * (lo + hi) <= self.nearby_limit
    }

    pub fn resolve_mode(&self, tensor: &SparseVoxelTensor) -> StvdMode {
        self.mode.unwrap_or(if tensor.origins().is_some() {
            StvdMode::VirtualOnly
        } else {
            StvdMode::AllVoxels
        })
    }
}

/// Per-row discard eligibility under `mode`.
fn eligibility(tensor: &SparseVoxelTensor, mode: StvdMode) -> Result<Vec<bool>, StvdError> {
    match mode {
        StvdMode::AllVoxels => Ok(vec![true; tensor.len()]),
        StvdMode::VirtualOnly => {
            let origins = tensor.origins().ok_or(StvdError::MissingOriginFlags)?;
            Ok(origins.iter().map(|&o| o != VoxelOrigin::Lidar).collect())
        }
    }
}

fn planar_bins(tensor: &SparseVoxelTensor, cfg: &StvdConfig) -> Vec<usize> {
    tensor
        .grid_points()
        .iter()
        .map(|p| cfg.bin_of(p[0].hypot(p[1])))
        .collect()
}

/// Eligible rows grouped per bin (overflow bin included), in row order.
fn eligible_by_bin(tensor: &SparseVoxelTensor, cfg: &StvdConfig) -> Result<Vec<Vec<usize>>, StvdError> {
    let eligible = eligibility(tensor, cfg.resolve_mode(tensor))?;
    let mut by_bin = vec![Vec::new(); cfg.num_bins + 1];
    for (row, bin) in planar_bins(tensor, cfg).into_iter().enumerate() {
        if eligible[row] {
            by_bin[bin].push(row);
        }
    }
    Ok(by_bin)
}

/// Bin-based input discard. Output rows keep their relative input order.
pub fn input_stvd(
    tensor: &SparseVoxelTensor,
    cfg: &StvdConfig,
    rng: &mut SeededRng,
) -> Result<SparseVoxelTensor, StvdError> {
    cfg.validate()?;
    if tensor.spec().stride_level != 1 {
        return Err(StvdError::NotInputLevel(tensor.spec().stride_level));
    }
    let by_bin = eligible_by_bin(tensor, cfg)?;
    let mut keep = vec![true; tensor.len()];
    for (bin, rows) in by_bin.iter().enumerate() {
        if !cfg.is_nearby(bin) || rows.len() <= cfg.keep_per_nearby_bin {
            continue;
        }
        for &r in rows {
            keep[r] = false;
        }
        for pos in rng.sample_sorted(rows.len(), cfg.keep_per_nearby_bin) {
            keep[rows[pos]] = true;
        }
    }
    let rows: Vec<usize> = (0..tensor.len()).filter(|&r| keep[r]).collect();
    Ok(tensor.select_rows(&rows))
}

/// Number of voxels [`input_stvd`] would keep with the given per-bin cap.
/// Independent of the random draw.
pub fn input_stvd_kept_count(
    tensor: &SparseVoxelTensor,
    cfg: &StvdConfig,
    keep_per_nearby_bin: usize,
) -> Result<usize, StvdError> {
    let by_bin = eligible_by_bin(tensor, cfg)?;
    let eligible: usize = by_bin.iter().map(Vec::len).sum();
    let dropped: usize = by_bin
        .iter()
        .enumerate()
        .filter(|(b, _)| cfg.is_nearby(*b))
        .map(|(_, rows)| rows.len().saturating_sub(keep_per_nearby_bin))
        .sum();
    Ok(tensor.len() - eligible + (eligible - dropped))
}

/// Per-bin cap whose kept count comes closest to `(1 - rate) * N`.
///
/// Returns `None` for `rate == 0` (discard disabled). Ties go to the larger
/// cap.
pub fn keep_for_discard_rate(
    tensor: &SparseVoxelTensor,
    cfg: &StvdConfig,
    rate: f64,
) -> Result<Option<usize>, StvdError> {
    if rate <= 0.0 {
        return Ok(None);
    }
    let by_bin = eligible_by_bin(tensor, cfg)?;
    let largest = by_bin
        .iter()
        .enumerate()
        .filter(|(b, _)| cfg.is_nearby(*b))
        .map(|(_, r)| r.len())
        .max()
        .unwrap_or(0)
        .max(1);
    let target = (1.0 - rate) * tensor.len() as f64;
    // kept count is monotone non-decreasing in the cap
    let (mut lo, mut hi) = (1usize, largest);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if (input_stvd_kept_count(tensor, cfg, mid)? as f64) < target {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let above = lo;
    let below = lo.saturating_sub(1).max(1);
    let err = |k: usize| -> Result<f64, StvdError> {
        Ok((input_stvd_kept_count(tensor, cfg, k)? as f64 - target).abs())
    };
    Ok(Some(if err(below)? < err(above)? { below } else { above }))
}

/// Training-time uniform discard of `round(rate * N)` voxels.
pub fn layer_stvd(
    tensor: &SparseVoxelTensor,
    rate: f64,
    rng: &mut SeededRng,
    training: bool,
) -> SparseVoxelTensor {
    layer_stvd_with_mode(tensor, rate, StvdMode::AllVoxels, rng, training)
        .expect("all-voxel mode needs no flags")
}

/// [`layer_stvd`] restricted to the voxels eligible under `mode`; the count
/// is taken over eligible voxels.
pub fn layer_stvd_with_mode(
    tensor: &SparseVoxelTensor,
    rate: f64,
    mode: StvdMode,
    rng: &mut SeededRng,
    training: bool,
) -> Result<SparseVoxelTensor, StvdError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(StvdError::InvalidConfig(format!("layer discard rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 || tensor.is_empty() {
        return Ok(tensor.clone());
    }
    let eligible = eligibility(tensor, mode)?;
    let candidates: Vec<usize> = (0..tensor.len()).filter(|&r| eligible[r]).collect();
    let n = candidates.len();
    let keep_n = n - (rate * n as f64).round() as usize;
    let mut keep: Vec<bool> = eligible.iter().map(|e| !e).collect();
    for pos in rng.sample_sorted(n, keep_n) {
        keep[candidates[pos]] = true;
    }
    let rows: Vec<usize> = (0..tensor.len()).filter(|&r| keep[r]).collect();
    Ok(tensor.select_rows(&rows))
}

/// Uniform random subset of `round(keep_fraction * N)` voxels.
pub fn random_sample(
    tensor: &SparseVoxelTensor,
    keep_fraction: f64,
    rng: &mut SeededRng,
) -> Result<SparseVoxelTensor, StvdError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(StvdError::InvalidConfig(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let n = tensor.len();
    let k = ((keep_fraction * n as f64).round() as usize).min(n);
    if k == n {
        return Ok(tensor.clone());
    }
    Ok(tensor.select_rows(&rng.sample_sorted(n, k)))
}

/// Greedy max-min farthest point sampling over grid points, starting at row
/// 0. Returns rows in selection order; ties pick the lowest row.
pub fn fps_order(points: &[[f64; 3]], keep_count: usize) -> Vec<usize> {
    let n = points.len();
    let k = keep_count.min(n);
    if k == 0 {
        return Vec::new();
    }
    let dist2 = |a: &[f64; 3], b: &[f64; 3]| {
        let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    };
    let mut min_d = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(k);
    let mut current = 0usize;
    loop {
        order.push(current);
        min_d[current] = f64::NEG_INFINITY;
        if order.len() == k {
            break;
        }
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..n {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(&points[i], &points[current]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.0 {
                best = (min_d[i], i);
            }
        }
        current = best.1;
    }
    order
}

/// Farthest point sampling as a tensor; rows keep their input order.
pub fn fps_sample(tensor: &SparseVoxelTensor, keep_count: usize) -> Result<SparseVoxelTensor, StvdError> {
    if keep_count > tensor.len() {
        return Err(StvdError::InvalidConfig(format!(
            "cannot keep {keep_count} of {} voxels",
            tensor.len()
        )));
    }
    let mut rows = fps_order(&tensor.grid_points(), keep_count);
    rows.sort_unstable();
    Ok(tensor.select_rows(&rows))
}

/// Voxel counts per planar-distance bin, overflow bin last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinHistogram {
    pub bounds: Vec<(f64, f64)>,
    pub counts: Vec<usize>,
}

impl BinHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn bin_histogram(tensor: &SparseVoxelTensor, cfg: &StvdConfig) -> BinHistogram {
    let mut counts = vec![0usize; cfg.num_bins + 1];
    for b in planar_bins(tensor, cfg) {
        counts[b] += 1;
    }
    BinHistogram {
        bounds: (0..=cfg.num_bins).map(|b| cfg.bin_bounds(b)).collect(),
        counts,
    }
}
