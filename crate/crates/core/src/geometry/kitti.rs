//! KITTI velodyne `.bin` reading and writing.
//!
//! A `.bin` file is a headerless run of little-endian `f32` quadruples
//! `(x, y, z, reflectance)`. Virtual-point files reuse the layout; their
//! fourth field is ignored on load.
//!
//! Fused clouds use a fifth `f32` per record, the origin indicator (0 LiDAR,
//! 1 virtual), so they can be split again after a round trip.

use std::path::Path;

use super::{GeometryError, Point, PointSource, SparsePointCloud};

pub const RECORD_BYTES: usize = 16;
pub const FUSED_RECORD_BYTES: usize = 20;

fn read_file(path: &Path) -> Result<Vec<u8>, GeometryError> {
    std::fs::read(path).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Decode records; `source` decides the origin indicator of every point.
pub fn parse_point_records(bytes: &[u8], source: PointSource) -> Result<SparsePointCloud, GeometryError> {
    let rem = bytes.len() % RECORD_BYTES;
    if rem != 0 {
        return Err(GeometryError::Truncated {
            offset: bytes.len() - rem,
            len: bytes.len(),
        });
    }
    let points = bytes
        .chunks_exact(RECORD_BYTES)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
            match source {
                PointSource::Lidar => Point::lidar(f(0), f(1), f(2), f(3)),
                PointSource::Virtual => Point::virtual_point(f(0), f(1), f(2)),
            }
        })
        .collect();
    SparsePointCloud::new(points)
}

pub fn read_velodyne_bin(path: impl AsRef<Path>) -> Result<SparsePointCloud, GeometryError> {
    let path = path.as_ref();
    parse_point_records(&read_file(path)?, PointSource::Lidar).map_err(|e| e.with_path(path))
}

pub fn read_virtual_bin(path: impl AsRef<Path>) -> Result<SparsePointCloud, GeometryError> {
    let path = path.as_ref();
    parse_point_records(&read_file(path)?, PointSource::Virtual).map_err(|e| e.with_path(path))
}

/// Encode as `.bin` records. Coordinates are narrowed to `f32`.
pub fn encode_point_records(cloud: &SparsePointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_bin(path: impl AsRef<Path>, cloud: &SparsePointCloud) -> Result<(), GeometryError> {
    let path = path.as_ref();
    std::fs::write(path, encode_point_records(cloud)).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn encode_fused_records(cloud: &SparsePointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * FUSED_RECORD_BYTES);
    for p in &cloud.points {
        for v in p.features() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn parse_fused_records(bytes: &[u8]) -> Result<SparsePointCloud, GeometryError> {
    let rem = bytes.len() % FUSED_RECORD_BYTES;
    if rem != 0 {
        return Err(GeometryError::Truncated {
            offset: bytes.len() - rem,
            len: bytes.len(),
        });
    }
    let points = bytes
        .chunks_exact(FUSED_RECORD_BYTES)
        .enumerate()
        .map(|(index, rec)| {
            let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
            match f(4) {
                b if b == 0.0 => Ok(Point::lidar(f(0), f(1), f(2), f(3))),
                b if b == 1.0 => Ok(Point {
                    intensity: f(3),
                    ..Point::virtual_point(f(0), f(1), f(2))
                }),
                b => Err(GeometryError::InvalidPoint {
                    index,
                    reason: format!("origin flag {b} is neither 0 nor 1"),
                }),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    SparsePointCloud::new(points)
}

pub fn read_fused_bin(path: impl AsRef<Path>) -> Result<SparsePointCloud, GeometryError> {
    let path = path.as_ref();
    parse_fused_records(&read_file(path)?).map_err(|e| e.with_path(path))
}

pub fn write_fused_bin(path: impl AsRef<Path>, cloud: &SparsePointCloud) -> Result<(), GeometryError> {
    let path = path.as_ref();
    std::fs::write(path, encode_fused_records(cloud)).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })
}
