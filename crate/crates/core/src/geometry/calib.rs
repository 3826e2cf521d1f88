use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AugmentationRecord, GeometryError};
use crate::tensor::SparseVoxelTensor;

/// Points closer than this along the camera axis do not project.
pub const MIN_PROJECTION_DEPTH: f64 = 0.1;

/// Orthonormality tolerance for rotation blocks.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// LiDAR-to-image projection parameters in the KITTI convention:
/// `pixel ~ P2 * [R0_rect * (Tr_velo_to_cam * [p; 1]); 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub cam_projection: Matrix3x4<f64>,
    pub rect: Matrix3<f64>,
    pub lidar_to_cam: Matrix3x4<f64>,
}

/// A discretised image-plane location: `floor(pixel / pixel_cell)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelCell {
    pub u: i32,
    pub v: i32,
}

impl PixelCell {
    pub const fn new(u: i32, v: i32) -> Self {
        Self { u, v }
    }
}

/// Pixel cell size used at a given stride level: 1 px at stride 1, doubling
/// with each level.
pub fn default_pixel_cell(stride_level: u32) -> u32 {
    stride_level.max(1)
}

fn orthonormal_deviation(r: &Matrix3<f64>) -> f64 {
    (r * r.transpose() - Matrix3::identity()).abs().max()
}

impl Calibration {
    pub fn new(
        cam_projection: Matrix3x4<f64>,
        rect: Matrix3<f64>,
        lidar_to_cam: Matrix3x4<f64>,
    ) -> Result<Self, GeometryError> {
        let dev = orthonormal_deviation(&rect);
        if !(dev <= ORTHONORMAL_TOL) {
            return Err(GeometryError::NotOrthonormal {
                what: "R0_rect",
                deviation: dev,
            });
        }
        let rot: Matrix3<f64> = lidar_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let dev = orthonormal_deviation(&rot);
        if !(dev <= ORTHONORMAL_TOL) {
            return Err(GeometryError::NotOrthonormal {
                what: "Tr_velo_to_cam rotation",
                deviation: dev,
            });
        }
        if cam_projection.iter().any(|v| !v.is_finite()) || lidar_to_cam.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteCalibration);
        }
        Ok(Self {
            cam_projection,
            rect,
            lidar_to_cam,
        })
    }

    /// A KITTI-like camera with identity rectification; LiDAR axes (x forward,
    /// y left, z up) map onto camera axes (z forward, -x, -y).
    pub fn synthetic_kitti() -> Self {
        let p2 = Matrix3x4::new(
            721.5377, 0.0, 609.5593, 44.85728, //
            0.0, 721.5377, 172.854, 0.2163791, //
            0.0, 0.0, 1.0, 0.002745884,
        );
        let tr = Matrix3x4::new(
            0.0, -1.0, 0.0, 0.0, //
            0.0, 0.0, -1.0, -0.08, //
            1.0, 0.0, 0.0, -0.27,
        );
        Self::new(p2, Matrix3::identity(), tr).expect("static calibration is valid")
    }

    /// Rectified camera-frame coordinates of a LiDAR-frame point.
    pub fn to_camera(&self, p: [f64; 3]) -> Vector3<f64> {
        let cam = self.lidar_to_cam * Vector4::new(p[0], p[1], p[2], 1.0);
        self.rect * cam
    }

    /// Pixel `(u, v)` of a LiDAR-frame point, or `None` when the point is
    /// within [`MIN_PROJECTION_DEPTH`] of the camera plane or behind it.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let cam = self.to_camera(p);
        if !(cam.z > MIN_PROJECTION_DEPTH) {
            return None;
        }
        let img = self.cam_projection * cam.push(1.0);
        if !(img.z > 0.0) {
            return None;
        }
        Some([img.x / img.z, img.y / img.z])
    }

    /// Camera ray through pixel `(u, v)` in the LiDAR frame, as
    /// `(centre of projection, unit direction)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
        // Rectified-frame points on the ray: c(w) = M^-1 (w [u v 1] - t).
        let m: Matrix3<f64> = self.cam_projection.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = self.cam_projection.column(3).into_owned();
        let m_inv = m.try_inverse().expect("camera intrinsics are invertible");
        let centre = -(m_inv * t);
        let dir = m_inv * Vector3::new(u, v, 1.0);

        // Rotation blocks are only orthonormal to ~1e-7 in real files, so use
        // true inverses rather than transposes.
        let rot: Matrix3<f64> = self.lidar_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let trans: Vector3<f64> = self.lidar_to_cam.column(3).into_owned();
        let rot_inv = rot.try_inverse().expect("rotation block is invertible");
        let back = rot_inv * self.rect.try_inverse().expect("rectification is invertible");
        let origin = back * centre - rot_inv * trans;
        let d = (back * dir).normalize();
        ([origin.x, origin.y, origin.z], [d.x, d.y, d.z])
    }

    pub fn project_points(&self, points: &[[f64; 3]]) -> Vec<Option<[f64; 2]>> {
        points.par_iter().map(|&p| self.project(p)).collect()
    }

    pub fn from_kitti_file(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_kitti_str(&text)
    }

    /// Parse `KEY: v1 v2 ...` lines; needs `P2` (12 values), `R0_rect` (9)
    /// and `Tr_velo_to_cam` (12). Other keys are ignored.
    pub fn from_kitti_str(text: &str) -> Result<Self, GeometryError> {
        let find = |key: &'static str, n: usize| -> Result<Vec<f64>, GeometryError> {
            let line = text
                .lines()
                .filter_map(|l| l.split_once(':'))
                .find(|(k, _)| k.trim() == key)
                .ok_or(GeometryError::MissingKey { key })?;
            let vals = line
                .1
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| GeometryError::BadNumber {
                        key,
                        token: tok.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if vals.len() != n {
                return Err(GeometryError::BadValueCount {
                    key,
                    expected: n,
                    found: vals.len(),
                });
            }
            Ok(vals)
        };
        let p2 = Matrix3x4::from_row_slice(&find("P2", 12)?);
        let r0 = Matrix3::from_row_slice(&find("R0_rect", 9)?);
        let tr = Matrix3x4::from_row_slice(&find("Tr_velo_to_cam", 12)?);
        Self::new(p2, r0, tr)
    }

    /// KITTI text form holding the three keys this crate reads.
    pub fn to_kitti_string(&self) -> String {
        let mut out = String::new();
        let row = |m: &[f64]| m.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        let flat34 = |m: &Matrix3x4<f64>| (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).collect::<Vec<_>>();
        let flat33 = |m: &Matrix3<f64>| (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).collect::<Vec<_>>();
        let _ = writeln!(out, "P2: {}", row(&flat34(&self.cam_projection)));
        let _ = writeln!(out, "R0_rect: {}", row(&flat33(&self.rect)));
        let _ = writeln!(out, "Tr_velo_to_cam: {}", row(&flat34(&self.lidar_to_cam)));
        out
    }
}

/// 2D indices of a voxel tensor through the chain
/// grid point -> inverse augmentation -> camera projection -> pixel cell.
///
/// `None` marks voxels that do not project (behind or too close to the camera);
/// those take no part in the 2D branch.
pub fn project_voxels(
    tensor: &SparseVoxelTensor,
    record: &AugmentationRecord,
    calib: &Calibration,
    pixel_cell: u32,
) -> Vec<Option<PixelCell>> {
    let points = tensor.grid_points();
    project_augmented_points(&points, record, calib, pixel_cell)
}

/// Same chain for arbitrary points given in the augmented frame.
pub fn project_augmented_points(
    points: &[[f64; 3]],
    record: &AugmentationRecord,
    calib: &Calibration,
    pixel_cell: u32,
) -> Vec<Option<PixelCell>> {
    assert!(pixel_cell > 0, "pixel cell must be positive");
    let cell = pixel_cell as f64;
    points
        .par_iter()
        .map(|&p| {
            let original = record.inverse_point(p);
            calib.project(original).map(|[u, v]| {
                PixelCell::new((u / cell).floor() as i32, (v / cell).floor() as i32)
            })
        })
        .collect()
}
