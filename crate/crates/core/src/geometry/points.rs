use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Which sensor produced a point. Encoded as the `beta` channel: 0 for LiDAR,
/// 1 for virtual (depth-completion) points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSource {
    Lidar,
    Virtual,
}

impl PointSource {
    pub fn beta(self) -> f64 {
        match self {
            Self::Lidar => 0.0,
            Self::Virtual => 1.0,
        }
    }
}

/// A fused point `[x, y, z, alpha, beta]`: metres, reflectance, origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    pub source: PointSource,
}

impl Point {
    pub fn lidar(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self {
            x,
            y,
            z,
            intensity,
            source: PointSource::Lidar,
        }
    }

    /// Virtual points carry zero intensity.
    pub fn virtual_point(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            intensity: 0.0,
            source: PointSource::Virtual,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn with_position(self, p: [f64; 3]) -> Self {
        Self {
            x: p[0],
            y: p[1],
            z: p[2],
            ..self
        }
    }

    /// The five-channel feature `[x, y, z, alpha, beta]`.
    pub fn features(&self) -> [f64; 5] {
        [self.x, self.y, self.z, self.intensity, self.source.beta()]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparsePointCloud {
    pub points: Vec<Point>,
}

impl SparsePointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        let cloud = Self { points };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()) {
                return Err(GeometryError::InvalidPoint {
                    index: i,
                    reason: "non-finite component".into(),
                });
            }
            if p.source == PointSource::Virtual && p.intensity != 0.0 {
                return Err(GeometryError::InvalidPoint {
                    index: i,
                    reason: format!("virtual point with intensity {}", p.intensity),
                });
            }
        }
        Ok(())
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(Point::position).collect()
    }

    pub fn count_source(&self, source: PointSource) -> usize {
        self.points.iter().filter(|p| p.source == source).count()
    }
}
