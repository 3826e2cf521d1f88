use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Global scene augmentation: uniform scale, then mirror across the x axis
/// (`y -> -y`) when `flip_y`, then rotation about z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub rotation_z: f64,
    pub scale: f64,
    pub flip_y: bool,
}

impl Default for AugmentationRecord {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentationRecord {
    pub const fn identity() -> Self {
        Self {
            rotation_z: 0.0,
            scale: 1.0,
            flip_y: false,
        }
    }

    pub fn new(rotation_z: f64, scale: f64, flip_y: bool) -> Result<Self, GeometryError> {
        let r = Self {
            rotation_z,
            scale,
            flip_y,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(GeometryError::InvalidAugmentation(format!(
                "scale {} must be positive",
                self.scale
            )));
        }
        if !(self.rotation_z > -PI && self.rotation_z <= PI) {
            return Err(GeometryError::InvalidAugmentation(format!(
                "rotation {} outside (-pi, pi]",
                self.rotation_z
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_z == 0.0 && self.scale == 1.0 && !self.flip_y
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.rotation_z.sin_cos();
        let x = p[0] * self.scale;
        let mut y = p[1] * self.scale;
        let z = p[2] * self.scale;
        if self.flip_y {
            y = -y;
        }
        [c * x - s * y, s * x + c * y, z]
    }

    pub fn inverse_point(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.rotation_z.sin_cos();
        let x = c * p[0] + s * p[1];
        let mut y = -s * p[0] + c * p[1];
        if self.flip_y {
            y = -y;
        }
        [x / self.scale, y / self.scale, p[2] / self.scale]
    }

    pub fn apply(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points.iter().map(|&p| self.apply_point(p)).collect()
    }

    pub fn apply_inverse(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points.iter().map(|&p| self.inverse_point(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_leaves_points_alone() {
        let r = AugmentationRecord::identity();
        let p = [1.25, -3.5, 0.75];
        assert_eq!(r.apply_point(p), p);
        assert_eq!(r.inverse_point(p), p);
    }

    #[test]
    fn quarter_turn() {
        let r = AugmentationRecord::new(PI / 2.0, 1.0, false).unwrap();
        let q = r.apply_point([1.0, 0.0, 0.0]);
        assert!((q[0] - 0.0).abs() < 1e-12);
        assert!((q[1] - 1.0).abs() < 1e-12);
        assert_eq!(q[2], 0.0);
    }

    #[test]
    fn scale_then_flip_then_rotate() {
        let r = AugmentationRecord::new(PI / 2.0, 2.0, true).unwrap();
        // (1, 1, 1) -> scale (2, 2, 2) -> flip (2, -2, 2) -> rotate (2, 2, 2)
        let q = r.apply_point([1.0, 1.0, 1.0]);
        assert!((q[0] - 2.0).abs() < 1e-12);
        assert!((q[1] - 2.0).abs() < 1e-12);
        assert!((q[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_records() {
        assert!(AugmentationRecord::new(0.0, 0.0, false).is_err());
        assert!(AugmentationRecord::new(-PI, 1.0, false).is_err());
        assert!(AugmentationRecord::new(PI, 1.0, false).is_ok());
    }

    proptest! {
        #[test]
        fn apply_then_inverse_round_trips(
            theta in -3.14159f64..=3.14159,
            scale in 0.9f64..1.1,
            flip in any::<bool>(),
            p in proptest::array::uniform3(-80.0f64..80.0),
        ) {
            let r = AugmentationRecord::new(theta, scale, flip).unwrap();
            let back = r.inverse_point(r.apply_point(p));
            for a in 0..3 {
                prop_assert!((back[a] - p[a]).abs() < 1e-9);
            }
        }
    }
}
