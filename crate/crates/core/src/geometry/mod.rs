//! Point clouds, voxelization, the augmentation transform and its inverse,
//! and the LiDAR-to-image projection chain.

mod augment;
mod calib;
pub mod kitti;
mod points;
mod voxelize;

use thiserror::Error;

use crate::tensor::TensorError;

pub use augment::AugmentationRecord;
pub use calib::{
    default_pixel_cell, project_augmented_points, project_voxels, Calibration, PixelCell,
    MIN_PROJECTION_DEPTH, ORTHONORMAL_TOL,
};
pub use kitti::{read_fused_bin, read_velodyne_bin, read_virtual_bin, write_bin, write_fused_bin};
pub use points::{Point, PointSource, SparsePointCloud};
pub use voxelize::{voxelize, voxelize_with_counts, POINT_FEATURES};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated point file: {len} bytes, incomplete record at byte offset {offset}")]
    Truncated { offset: usize, len: usize },
    #[error("{path}: {inner}")]
    InFile {
        path: String,
        #[source]
        inner: Box<GeometryError>,
    },
    #[error("calibration key {key} is missing")]
    MissingKey { key: &'static str },
    #[error("calibration key {key}: expected {expected} values, found {found}")]
    BadValueCount {
        key: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("calibration key {key}: cannot parse {token:?} as a number")]
    BadNumber { key: &'static str, token: String },
    #[error("{what} is not orthonormal (max deviation {deviation:.3e})")]
    NotOrthonormal { what: &'static str, deviation: f64 },
    #[error("calibration contains non-finite values")]
    NonFiniteCalibration,
    #[error("invalid point {index}: {reason}")]
    InvalidPoint { index: usize, reason: String },
    #[error("invalid augmentation: {0}")]
    InvalidAugmentation(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl GeometryError {
    fn with_path(self, path: &std::path::Path) -> Self {
        match self {
            e @ (Self::Io { .. } | Self::InFile { .. }) => e,
            e => Self::InFile {
                path: path.display().to_string(),
                inner: Box::new(e),
            },
        }
    }

    /// True for malformed or unreadable inputs, as opposed to shape or
    /// configuration problems.
    pub fn is_parse_error(&self) -> bool {
        match self {
            Self::Io { .. }
            | Self::Truncated { .. }
            | Self::MissingKey { .. }
            | Self::BadValueCount { .. }
            | Self::BadNumber { .. }
            | Self::NotOrthonormal { .. }
            | Self::NonFiniteCalibration
            | Self::InvalidPoint { .. } => true,
            Self::InFile { inner, .. } => inner.is_parse_error(),
            Self::InvalidAugmentation(_) | Self::Tensor(_) => false,
        }
    }
}
