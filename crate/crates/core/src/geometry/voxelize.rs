use rustc_hash::FxHashMap;

use super::{GeometryError, SparsePointCloud};
use crate::tensor::{FeatureMatrix, SparseVoxelTensor, VoxelGridSpec, VoxelIndex, VoxelOrigin};

/// Width of level-0 voxel features: mean `[x, y, z, alpha, beta]`.
pub const POINT_FEATURES: usize = 5;

/// Mean-pool points into voxels. Points outside the grid are dropped.
///
/// Rows come out sorted by voxel index, so the result does not depend on the
/// order of the input points beyond floating-point summation order inside a
/// voxel (which follows point order).
pub fn voxelize(cloud: &SparsePointCloud, spec: &VoxelGridSpec) -> Result<SparseVoxelTensor, GeometryError> {
    voxelize_with_counts(cloud, spec).map(|(t, _)| t)
}

/// [`voxelize`] plus the number of points that landed in each row.
pub fn voxelize_with_counts(
    cloud: &SparsePointCloud,
    spec: &VoxelGridSpec,
) -> Result<(SparseVoxelTensor, Vec<u32>), GeometryError> {
    spec.validate()?;
    let mut slots: FxHashMap<VoxelIndex, usize> = FxHashMap::default();
    let mut keys: Vec<VoxelIndex> = Vec::new();
    let mut sums: Vec<[f64; POINT_FEATURES]> = Vec::new();
    let mut counts: Vec<u32> = Vec::new();

    for p in &cloud.points {
        let Some(idx) = spec.locate(p.position()) else {
            continue;
        };
        let slot = *slots.entry(idx).or_insert_with(|| {
            keys.push(idx);
            sums.push([0.0; POINT_FEATURES]);
            counts.push(0);
            keys.len() - 1
        });
        for (s, f) in sums[slot].iter_mut().zip(p.features()) {
            *s += f;
        }
        counts[slot] += 1;
    }

    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_unstable_by_key(|&s| keys[s]);

    let mut indices = Vec::with_capacity(order.len());
    let mut data = Vec::with_capacity(order.len() * POINT_FEATURES);
    let mut origins = Vec::with_capacity(order.len());
    let mut out_counts = Vec::with_capacity(order.len());
    for &s in &order {
        let n = counts[s] as f64;
        let mean = sums[s].map(|v| v / n);
        indices.push(keys[s]);
        data.extend_from_slice(&mean);
        origins.push(VoxelOrigin::from_mean_beta(mean[4]));
        out_counts.push(counts[s]);
    }
    let features = FeatureMatrix::new(indices.len(), POINT_FEATURES, data)?;
    let tensor = SparseVoxelTensor::build(indices, features, spec.clone())?.with_origins(origins)?;
    Ok((tensor, out_counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    fn unit_spec() -> VoxelGridSpec {
        VoxelGridSpec::new([0.0; 3], [0.1; 3], [100, 100, 100]).unwrap()
    }

    #[test]
    fn empty_cloud_gives_empty_tensor() {
        let t = voxelize(&SparsePointCloud::default(), &unit_spec()).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.width(), POINT_FEATURES);
    }

    #[test]
    fn two_points_share_a_voxel() {
        let cloud = SparsePointCloud::new(vec![
            Point::lidar(0.05, 0.05, 0.05, 0.2),
            Point::lidar(0.07, 0.03, 0.05, 0.4),
        ])
        .unwrap();
        let t = voxelize(&cloud, &unit_spec()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.index(0), VoxelIndex::new(0, 0, 0));
        let f = t.feature_row(0);
        assert!((f[0] - 0.06).abs() < 1e-15);
        assert!((f[1] - 0.04).abs() < 1e-15);
        assert!((f[3] - 0.3).abs() < 1e-15);
        assert_eq!(f[4], 0.0);
        assert_eq!(t.origins().unwrap(), &[VoxelOrigin::Lidar]);
    }

    #[test]
    fn out_of_range_points_are_cropped() {
        let cloud = SparsePointCloud::new(vec![
            Point::lidar(-0.01, 0.5, 0.5, 0.0),
            Point::lidar(10.0, 0.5, 0.5, 0.0),
            Point::lidar(0.5, 0.5, 0.5, 0.0),
        ])
        .unwrap();
        let (t, counts) = voxelize_with_counts(&cloud, &unit_spec()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(counts, vec![1]);
    }

    #[test]
    fn origin_flag_follows_mean_beta() {
        let cloud = SparsePointCloud::new(vec![
            Point::lidar(0.01, 0.01, 0.01, 0.5),
            Point::virtual_point(0.02, 0.01, 0.01),
            Point::virtual_point(0.51, 0.01, 0.01),
            Point::virtual_point(0.52, 0.01, 0.01),
            Point::lidar(0.53, 0.01, 0.01, 0.1),
        ])
        .unwrap();
        let t = voxelize(&cloud, &unit_spec()).unwrap();
        assert_eq!(t.origins().unwrap(), &[VoxelOrigin::Mixed, VoxelOrigin::Virtual]);
    }
}
