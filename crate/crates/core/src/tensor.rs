//! Sparse voxel tensors: an index set `H` (N x 3) paired with a feature
//! matrix `X` (N x C), plus a hash lookup from index to row.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Sentinel used in neighbor tables for "no voxel at this offset".
pub const NO_NEIGHBOR: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("duplicate voxel index {index} at rows {first} and {second}")]
    DuplicateIndex {
        index: VoxelIndex,
        first: usize,
        second: usize,
    },
    #[error("voxel index {index} at row {row} lies outside grid extent {extent:?}")]
    OutOfExtent {
        index: VoxelIndex,
        row: usize,
        extent: [u32; 3],
    },
    #[error("feature matrix has {rows} rows but {indices} indices were given")]
    RowCountMismatch { rows: usize, indices: usize },
    #[error("feature buffer of length {len} does not form a {rows} x {cols} matrix")]
    BadShape { len: usize, rows: usize, cols: usize },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("origin flags have length {flags}, expected {rows}")]
    OriginLengthMismatch { flags: usize, rows: usize },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
}

/// Integer voxel coordinate. Storage order is (x, y, z); the derived `Ord`
/// is the lexicographic order used wherever ordering matters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelIndex {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn offset(self, o: Offset3) -> Self {
        Self::new(self.x + o.dx, self.y + o.dy, self.z + o.dz)
    }

    /// Parent index one stride level up (floor halving).
    pub fn halved(self) -> Self {
        Self::new(self.x.div_euclid(2), self.y.div_euclid(2), self.z.div_euclid(2))
    }

    pub fn as_array(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[i32; 3]> for VoxelIndex {
    fn from(v: [i32; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl fmt::Display for VoxelIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// One of the 27 offsets of a 3x3x3 kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Offset3 {
    pub dx: i32,
    pub dy: i32,
    pub dz: i32,
}

impl Offset3 {
    /// Kernel slot, lexicographic over (dz, dy, dx).
    pub const fn id(self) -> usize {
        ((self.dz + 1) * 9 + (self.dy + 1) * 3 + (self.dx + 1)) as usize
    }

    pub const fn from_id(id: usize) -> Self {
        let id = id as i32;
        Self {
            dz: id / 9 - 1,
            dy: (id / 3) % 3 - 1,
            dx: id % 3 - 1,
        }
    }

    pub const fn negated(self) -> Self {
        Self {
            dx: -self.dx,
            dy: -self.dy,
            dz: -self.dz,
        }
    }
}

pub const KERNEL_VOLUME_3D: usize = 27;
pub const CENTER_OFFSET_3D: usize = 13;

/// All 27 offsets in kernel-slot order.
pub fn offsets_3d() -> impl Iterator<Item = Offset3> {
    (0..KERNEL_VOLUME_3D).map(Offset3::from_id)
}

/// Voxelization parameters of a grid level.
///
/// `voxel_size` is always the level-0 cell size; the metric size of a cell at
/// this level is `voxel_size * stride_level`. `extent` counts cells at this
/// level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub extent: [u32; 3],
    pub stride_level: u32,
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], voxel_size: [f64; 3], extent: [u32; 3]) -> Result<Self, TensorError> {
        let spec = Self {
            origin,
            voxel_size,
            extent,
            stride_level: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid covering `[lo, hi)` with the given cell size; extents are rounded
    /// to the nearest whole cell.
    pub fn from_range(lo: [f64; 3], hi: [f64; 3], voxel_size: [f64; 3]) -> Result<Self, TensorError> {
        let mut extent = [0u32; 3];
        for a in 0..3 {
            let n = ((hi[a] - lo[a]) / voxel_size[a]).round();
            if !(n >= 1.0) || n > i32::MAX as f64 {
                return Err(TensorError::InvalidSpec(format!(
                    "axis {a}: range [{}, {}) with cell {} gives no cells",
                    lo[a], hi[a], voxel_size[a]
                )));
            }
            extent[a] = n as u32;
        }
        Self::new(lo, voxel_size, extent)
    }

    /// The usual KITTI detection range: x in [0, 70.4], y in [-40, 40],
    /// z in [-3, 1] metres at 0.05 x 0.05 x 0.1 m cells.
    pub fn kitti_default() -> Self {
        Self::from_range([0.0, -40.0, -3.0], [70.4, 40.0, 1.0], [0.05, 0.05, 0.1])
            .expect("static grid is valid")
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        for a in 0..3 {
            if !(self.voxel_size[a] > 0.0) || !self.voxel_size[a].is_finite() {
                return Err(TensorError::InvalidSpec(format!(
                    "voxel_size[{a}] = {} must be positive",
                    self.voxel_size[a]
                )));
            }
            if self.extent[a] == 0 || self.extent[a] > i32::MAX as u32 {
                return Err(TensorError::InvalidSpec(format!(
                    "extent[{a}] = {} out of range",
                    self.extent[a]
                )));
            }
            if !self.origin[a].is_finite() {
                return Err(TensorError::InvalidSpec(format!("origin[{a}] is not finite")));
            }
        }
        if self.stride_level == 0 || !self.stride_level.is_power_of_two() {
            return Err(TensorError::InvalidSpec(format!(
                "stride_level {} is not a power of two",
                self.stride_level
            )));
        }
        Ok(())
    }

    /// Metric edge lengths of one cell at this level.
    pub fn cell_size(&self) -> [f64; 3] {
        let s = self.stride_level as f64;
        [self.voxel_size[0] * s, self.voxel_size[1] * s, self.voxel_size[2] * s]
    }

    pub fn contains(&self, idx: VoxelIndex) -> bool {
        let e = self.extent;
        idx.x >= 0
            && idx.y >= 0
            && idx.z >= 0
            && (idx.x as u32) < e[0]
            && (idx.y as u32) < e[1]
            && (idx.z as u32) < e[2]
    }

    /// Cell containing a metric point, or `None` outside the grid.
    pub fn locate(&self, p: [f64; 3]) -> Option<VoxelIndex> {
        let cell = self.cell_size();
        let mut out = [0i32; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / cell[a]).floor();
            if !(f >= 0.0 && f < self.extent[a] as f64) {
                return None;
            }
            out[a] = f as i32;
        }
        Some(VoxelIndex::from(out))
    }

    /// Metric centre of a cell at this level.
    pub fn center(&self, idx: VoxelIndex) -> [f64; 3] {
        let cell = self.cell_size();
        let i = idx.as_array();
        [
            self.origin[0] + (i[0] as f64 + 0.5) * cell[0],
            self.origin[1] + (i[1] as f64 + 0.5) * cell[1],
            self.origin[2] + (i[2] as f64 + 0.5) * cell[2],
        ]
    }

    /// Spec one stride level coarser: stride doubled, extent halved (ceil).
    pub fn downsampled(&self) -> Self {
        Self {
            origin: self.origin,
            voxel_size: self.voxel_size,
            extent: self.extent.map(|e| e.div_ceil(2)),
            stride_level: self.stride_level * 2,
        }
    }
}

/// Provenance of a voxel derived from the mean origin indicator of its points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelOrigin {
    Lidar,
    Virtual,
    Mixed,
}

impl VoxelOrigin {
    /// Classify from the mean of per-point indicators (0 = LiDAR, 1 = virtual).
    pub fn from_mean_beta(beta: f64) -> Self {
        if beta < 0.5 {
            Self::Lidar
        } else if beta > 0.5 {
            Self::Virtual
        } else {
            Self::Mixed
        }
    }

    /// Combine two provenances when voxels merge.
    pub fn merge(self, other: Self) -> Self {
        if self == other {
            self
        } else {
            Self::Mixed
        }
    }
}

/// Dense row-major matrix of per-voxel activations.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadShape {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::BadShape {
                    len: r.len(),
                    rows: rows.len(),
                    cols,
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Column-wise concatenation `[self, other]`.
    pub fn hconcat(&self, other: &Self) -> Result<Self, TensorError> {
        if self.rows != other.rows {
            return Err(TensorError::RowCountMismatch {
                rows: other.rows,
                indices: self.rows,
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Self {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Split columns at `at` into `(left, right)`.
    pub fn split_cols(&self, at: usize) -> (Self, Self) {
        assert!(at <= self.cols);
        let mut left = Self::zeros(self.rows, at);
        let mut right = Self::zeros(self.rows, self.cols - at);
        for i in 0..self.rows {
            let r = self.row(i);
            left.row_mut(i).copy_from_slice(&r[..at]);
            right.row_mut(i).copy_from_slice(&r[at..]);
        }
        (left, right)
    }

    fn first_non_finite(&self) -> Option<(usize, usize)> {
        let cols = self.cols.max(1);
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / cols, p % cols))
    }
}

#[derive(Debug)]
struct Sites {
    indices: Vec<VoxelIndex>,
    lookup: FxHashMap<VoxelIndex, u32>,
}

/// Immutable sparse voxel tensor.
///
/// The index set and its lookup table sit behind an `Arc`, so tensors that
/// share sites (every submanifold layer output) are cheap to produce.
#[derive(Clone, Debug)]
pub struct SparseVoxelTensor {
    spec: VoxelGridSpec,
    sites: Arc<Sites>,
    features: FeatureMatrix,
    origins: Option<Vec<VoxelOrigin>>,
}

impl SparseVoxelTensor {
    pub fn build(
        indices: Vec<VoxelIndex>,
        features: FeatureMatrix,
        spec: VoxelGridSpec,
    ) -> Result<Self, TensorError> {
        spec.validate()?;
        if features.rows() != indices.len() {
            return Err(TensorError::RowCountMismatch {
                rows: features.rows(),
                indices: indices.len(),
            });
        }
        if let Some((row, col)) = features.first_non_finite() {
            return Err(TensorError::NonFinite { row, col });
        }
        let mut lookup = FxHashMap::default();
        lookup.reserve(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            if !spec.contains(idx) {
                return Err(TensorError::OutOfExtent {
                    index: idx,
                    row,
                    extent: spec.extent,
                });
            }
            if let Some(first) = lookup.insert(idx, row as u32) {
                return Err(TensorError::DuplicateIndex {
                    index: idx,
                    first: first as usize,
                    second: row,
                });
            }
        }
        Ok(Self {
            spec,
            sites: Arc::new(Sites { indices, lookup }),
            features,
            origins: None,
        })
    }

    pub fn empty(spec: VoxelGridSpec, width: usize) -> Result<Self, TensorError> {
        Self::build(Vec::new(), FeatureMatrix::zeros(0, width), spec)
    }

    pub fn with_origins(mut self, origins: Vec<VoxelOrigin>) -> Result<Self, TensorError> {
        if origins.len() != self.len() {
            return Err(TensorError::OriginLengthMismatch {
                flags: origins.len(),
                rows: self.len(),
            });
        }
        self.origins = Some(origins);
        Ok(self)
    }

    /// Same sites and provenance, new features (width may change).
    pub fn with_features(&self, features: FeatureMatrix) -> Result<Self, TensorError> {
        if features.rows() != self.len() {
            return Err(TensorError::RowCountMismatch {
                rows: features.rows(),
                indices: self.len(),
            });
        }
        if let Some((row, col)) = features.first_non_finite() {
            return Err(TensorError::NonFinite { row, col });
        }
        Ok(Self {
            spec: self.spec.clone(),
            sites: Arc::clone(&self.sites),
            features,
            origins: self.origins.clone(),
        })
    }

    /// Subset of rows in the given order, features copied bit-exactly.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let indices: Vec<VoxelIndex> = rows.iter().map(|&r| self.sites.indices[r]).collect();
        let lookup = indices
            .iter()
            .enumerate()
            .map(|(i, &idx)| (idx, i as u32))
            .collect();
        Self {
            spec: self.spec.clone(),
            sites: Arc::new(Sites { indices, lookup }),
            features: self.features.select_rows(rows),
            origins: self
                .origins
                .as_ref()
                .map(|o| rows.iter().map(|&r| o[r]).collect()),
        }
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.sites.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn indices(&self) -> &[VoxelIndex] {
        &self.sites.indices
    }

    pub fn index(&self, row: usize) -> VoxelIndex {
        self.sites.indices[row]
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn feature_row(&self, row: usize) -> &[f64] {
        self.features.row(row)
    }

    pub fn origins(&self) -> Option<&[VoxelOrigin]> {
        self.origins.as_deref()
    }

    /// Row position of an index, if occupied.
    pub fn find(&self, idx: VoxelIndex) -> Option<usize> {
        self.sites.lookup.get(&idx).map(|&r| r as usize)
    }

    pub fn contains(&self, idx: VoxelIndex) -> bool {
        self.sites.lookup.contains_key(&idx)
    }

    /// Whether two tensors share the same site allocation.
    pub fn shares_sites_with(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.sites, &other.sites)
    }

    /// Occupied voxels in the 3x3x3 neighborhood of `row`, including itself,
    /// in kernel-slot order.
    pub fn neighbors_3d(&self, row: usize) -> Vec<(Offset3, usize)> {
        let center = self.sites.indices[row];
        offsets_3d()
            .filter_map(|o| self.find(center.offset(o)).map(|r| (o, r)))
            .collect()
    }

    /// Neighbor table for submanifold convolution: entry `[row][slot]` is the
    /// row at that kernel offset or [`NO_NEIGHBOR`].
    pub fn neighbor_table(&self) -> Vec<[u32; KERNEL_VOLUME_3D]> {
        let lookup = &self.sites.lookup;
        self.sites
            .indices
            .par_iter()
            .map(|&center| {
                let mut slots = [NO_NEIGHBOR; KERNEL_VOLUME_3D];
                for (slot, o) in offsets_3d().enumerate() {
                    if let Some(&r) = lookup.get(&center.offset(o)) {
                        slots[slot] = r;
                    }
                }
                slots
            })
            .collect()
    }

    /// Metric grid point (cell centre) of every voxel, in row order.
    pub fn grid_points(&self) -> Vec<[f64; 3]> {
        self.sites
            .indices
            .iter()
            .map(|&i| self.spec.center(i))
            .collect()
    }

    /// SHA-256 over spec, indices and feature bits, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.spec.origin.iter().chain(&self.spec.voxel_size) {
            h.update(v.to_le_bytes());
        }
        for e in self.spec.extent {
            h.update(e.to_le_bytes());
        }
        h.update(self.spec.stride_level.to_le_bytes());
        h.update((self.width() as u64).to_le_bytes());
        for idx in self.indices() {
            for c in idx.as_array() {
                h.update(c.to_le_bytes());
            }
        }
        for v in self.features.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_dump(&self) -> TensorDump {
        TensorDump {
            spec: self.spec.clone(),
            indices: self.indices().iter().map(|i| i.as_array()).collect(),
            features: self.features.iter_rows().map(<[f64]>::to_vec).collect(),
            width: self.width(),
            origin_flags: self.origins.clone(),
        }
    }

    pub fn from_dump(dump: TensorDump) -> Result<Self, TensorError> {
        let indices = dump.indices.into_iter().map(VoxelIndex::from).collect();
        let features = if dump.features.is_empty() {
            FeatureMatrix::zeros(0, dump.width)
        } else {
            FeatureMatrix::from_rows(&dump.features)?
        };
        let t = Self::build(indices, features, dump.spec)?;
        match dump.origin_flags {
            Some(o) => t.with_origins(o),
            None => Ok(t),
        }
    }
}

/// JSON debug dump layout: `{spec, width, indices: [[x,y,z],..], features: [[..],..], origin_flags?}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDump {
    pub spec: VoxelGridSpec,
    pub width: usize,
    pub indices: Vec<[i32; 3]>,
    pub features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_flags: Option<Vec<VoxelOrigin>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> VoxelGridSpec {
        VoxelGridSpec::new([0.0; 3], [0.1; 3], [16, 16, 16]).unwrap()
    }

    #[test]
    fn empty_tensor() {
        let t = SparseVoxelTensor::build(vec![], FeatureMatrix::zeros(0, 4), small_spec()).unwrap();
        assert_eq!(t.len(), 0);
        assert_eq!(t.width(), 4);
        assert!(t.grid_points().is_empty());
    }

    #[test]
    fn insertion_order_is_row_order() {
        let f = FeatureMatrix::new(2, 4, (0..8).map(f64::from).collect()).unwrap();
        let t = SparseVoxelTensor::build(
            vec![VoxelIndex::new(0, 0, 0), VoxelIndex::new(1, 0, 0)],
            f,
            small_spec(),
        )
        .unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.find(VoxelIndex::new(1, 0, 0)), Some(1));
        assert_eq!(t.find(VoxelIndex::new(0, 1, 0)), None);
    }

    #[test]
    fn rejects_duplicates_and_bad_shapes() {
        let err = SparseVoxelTensor::build(
            vec![VoxelIndex::new(2, 3, 4), VoxelIndex::new(2, 3, 4)],
            FeatureMatrix::zeros(2, 1),
            small_spec(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            TensorError::DuplicateIndex {
                index: VoxelIndex::new(2, 3, 4),
                first: 0,
                second: 1
            }
        );
        assert!(err.to_string().contains("(2, 3, 4)"));

        let err = SparseVoxelTensor::build(
            vec![VoxelIndex::new(16, 0, 0)],
            FeatureMatrix::zeros(1, 1),
            small_spec(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::OutOfExtent { .. }));

        let err = SparseVoxelTensor::build(
            vec![VoxelIndex::new(-1, 0, 0)],
            FeatureMatrix::zeros(1, 1),
            small_spec(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::OutOfExtent { .. }));

        let err = SparseVoxelTensor::build(
            vec![VoxelIndex::new(0, 0, 0)],
            FeatureMatrix::zeros(2, 1),
            small_spec(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::RowCountMismatch { rows: 2, indices: 1 }));
    }

    #[test]
    fn rejects_non_finite_features() {
        let f = FeatureMatrix::new(1, 2, vec![0.0, f64::NAN]).unwrap();
        let err = SparseVoxelTensor::build(vec![VoxelIndex::new(0, 0, 0)], f, small_spec()).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { row: 0, col: 1 });
    }

    #[test]
    fn spec_validation() {
        assert!(VoxelGridSpec::new([0.0; 3], [0.0, 0.1, 0.1], [1, 1, 1]).is_err());
        assert!(VoxelGridSpec::new([0.0; 3], [0.1; 3], [1, 0, 1]).is_err());
        let mut s = small_spec();
        s.stride_level = 3;
        assert!(s.validate().is_err());
        let k = VoxelGridSpec::kitti_default();
        assert_eq!(k.extent, [1408, 1600, 40]);
    }

    #[test]
    fn offset_slots_are_lexicographic_in_zyx() {
        let all: Vec<Offset3> = offsets_3d().collect();
        assert_eq!(all[0], Offset3 { dx: -1, dy: -1, dz: -1 });
        assert_eq!(all[1], Offset3 { dx: 0, dy: -1, dz: -1 });
        assert_eq!(all[3], Offset3 { dx: -1, dy: 0, dz: -1 });
        assert_eq!(all[9], Offset3 { dx: -1, dy: -1, dz: 0 });
        assert_eq!(all[CENTER_OFFSET_3D], Offset3 { dx: 0, dy: 0, dz: 0 });
        for (k, o) in all.iter().enumerate() {
            assert_eq!(o.id(), k);
            assert_eq!(o.negated().id(), KERNEL_VOLUME_3D - 1 - k);
        }
    }

    #[test]
    fn isolated_voxel_has_only_center_neighbor() {
        let t = SparseVoxelTensor::build(
            vec![VoxelIndex::new(5, 5, 5), VoxelIndex::new(9, 9, 9)],
            FeatureMatrix::zeros(2, 1),
            small_spec(),
        )
        .unwrap();
        let n = t.neighbors_3d(0);
        assert_eq!(n, vec![(Offset3::from_id(CENTER_OFFSET_3D), 0)]);
    }

    #[test]
    fn dense_block_center_has_27_neighbors() {
        let mut idx = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    idx.push(VoxelIndex::new(x, y, z));
                }
            }
        }
        let n = idx.len();
        let t = SparseVoxelTensor::build(idx, FeatureMatrix::zeros(n, 1), small_spec()).unwrap();
        let center = t.find(VoxelIndex::new(1, 1, 1)).unwrap();
        let nb = t.neighbors_3d(center);
        assert_eq!(nb.len(), 27);
        let slots: Vec<usize> = nb.iter().map(|(o, _)| o.id()).collect();
        assert_eq!(slots, (0..27).collect::<Vec<_>>());
        let table = t.neighbor_table();
        assert!(table[center].iter().all(|&r| r != NO_NEIGHBOR));
    }

    #[test]
    fn select_rows_keeps_features_bit_exact() {
        let f = FeatureMatrix::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let t = SparseVoxelTensor::build(
            vec![VoxelIndex::new(0, 0, 0), VoxelIndex::new(1, 0, 0), VoxelIndex::new(2, 0, 0)],
            f,
            small_spec(),
        )
        .unwrap()
        .with_origins(vec![VoxelOrigin::Lidar, VoxelOrigin::Virtual, VoxelOrigin::Mixed])
        .unwrap();
        let s = t.select_rows(&[2, 0]);
        assert_eq!(s.indices(), &[VoxelIndex::new(2, 0, 0), VoxelIndex::new(0, 0, 0)]);
        assert_eq!(s.feature_row(0), &[0.5, 0.6]);
        assert_eq!(s.find(VoxelIndex::new(0, 0, 0)), Some(1));
        assert_eq!(s.origins().unwrap(), &[VoxelOrigin::Mixed, VoxelOrigin::Lidar]);
    }

    #[test]
    fn dump_round_trips_through_json() {
        let f = FeatureMatrix::new(2, 3, vec![1.5, -2.0, 0.1, 3.25, 1e-7, 7.0]).unwrap();
        let t = SparseVoxelTensor::build(
            vec![VoxelIndex::new(3, 1, 2), VoxelIndex::new(0, 4, 1)],
            f,
            small_spec(),
        )
        .unwrap();
        let json = serde_json::to_string(&t.to_dump()).unwrap();
        let back = SparseVoxelTensor::from_dump(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.indices(), t.indices());
        assert_eq!(back.features(), t.features());
        assert_eq!(back.checksum(), t.checksum());
    }

    #[test]
    fn downsampled_spec_halves_extent_with_ceiling() {
        let s = VoxelGridSpec::new([0.0; 3], [0.05, 0.05, 0.1], [1408, 1600, 41]).unwrap();
        let d = s.downsampled();
        assert_eq!(d.extent, [704, 800, 21]);
        assert_eq!(d.stride_level, 2);
        assert_eq!(d.cell_size(), [0.1, 0.1, 0.2]);
    }

    #[test]
    fn merge_origin() {
        use VoxelOrigin::*;
        assert_eq!(Lidar.merge(Lidar), Lidar);
        assert_eq!(Lidar.merge(Virtual), Mixed);
        assert_eq!(VoxelOrigin::from_mean_beta(0.5), Mixed);
        assert_eq!(VoxelOrigin::from_mean_beta(0.25), Lidar);
        assert_eq!(VoxelOrigin::from_mean_beta(0.75), Virtual);
    }
}
