use super::NetError;
use crate::geometry::{PointSource, SparsePointCloud};

/// Early fusion: LiDAR points followed by virtual points, each source in its
/// original order.
pub fn fuse_early(lidar: &SparsePointCloud, virtual_points: &SparsePointCloud) -> Result<SparsePointCloud, NetError> {
    if let Some(index) = lidar.points.iter().position(|p| p.source != PointSource::Lidar) {
        return Err(NetError::MixedSources { cloud: "lidar", index });
    }
    if let Some(index) = virtual_points
        .points
        .iter()
        .position(|p| p.source != PointSource::Virtual || p.intensity != 0.0)
    {
        return Err(NetError::MixedSources { cloud: "virtual", index });
    }
    let mut points = Vec::with_capacity(lidar.len() + virtual_points.len());
    points.extend_from_slice(&lidar.points);
    points.extend_from_slice(&virtual_points.points);
    Ok(SparsePointCloud { points })
}

/// Inverse of [`fuse_early`]: partition by origin flag, order preserved.
pub fn split_by_origin(cloud: &SparsePointCloud) -> (SparsePointCloud, SparsePointCloud) {
    let (l, v): (Vec<_>, Vec<_>) = cloud.points.iter().partition(|p| p.source == PointSource::Lidar);
    (SparsePointCloud { points: l }, SparsePointCloud { points: v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::kitti::encode_point_records;
    use crate::geometry::Point;

    fn clouds(n: usize, m: usize) -> (SparsePointCloud, SparsePointCloud) {
        let l = (0..n).map(|i| Point::lidar(i as f64, 0.5, -1.0, 0.25)).collect();
        let v = (0..m).map(|i| Point::virtual_point(i as f64 * 0.1, -0.5, -1.2)).collect();
        (SparsePointCloud::new(l).unwrap(), SparsePointCloud::new(v).unwrap())
    }

    #[test]
    fn sizes_add_up() {
        let (l, v) = clouds(100, 2700);
        let f = fuse_early(&l, &v).unwrap();
        assert_eq!(f.len(), 2800);
        assert!(f.points[100..].iter().all(|p| p.features()[3] == 0.0 && p.features()[4] == 1.0));
    }

    #[test]
    fn empty_virtual_is_identity() {
        let (l, _) = clouds(10, 0);
        assert_eq!(fuse_early(&l, &SparsePointCloud::default()).unwrap(), l);
        assert_eq!(fuse_early(&SparsePointCloud::default(), &SparsePointCloud::default()).unwrap().len(), 0);
    }

    #[test]
    fn split_recovers_inputs_bytewise() {
        let (l, v) = clouds(37, 91);
        let (l2, v2) = split_by_origin(&fuse_early(&l, &v).unwrap());
        assert_eq!(encode_point_records(&l2), encode_point_records(&l));
        assert_eq!(encode_point_records(&v2), encode_point_records(&v));
    }

    #[test]
    fn wrong_flags_rejected() {
        let (l, v) = clouds(3, 3);
        assert!(matches!(fuse_early(&v, &l), Err(NetError::MixedSources { cloud: "lidar", index: 0 })));
    }
}
