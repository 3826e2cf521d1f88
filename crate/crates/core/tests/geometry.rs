use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use virconv::geometry::{
    project_augmented_points, project_voxels, read_velodyne_bin, voxelize, AugmentationRecord, Calibration, Point,
    PointSource, SparsePointCloud,
};
use virconv::{SeededRng, VoxelGridSpec};
use virconv_oracle::project_point;

fn kitti(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/kitti").join(name)
}

/// Matrices read straight from the calibration text, row-major.
fn raw_matrices(text: &str) -> ([[f64; 4]; 3], [[f64; 3]; 3], [[f64; 4]; 3]) {
    let values = |key: &str| -> Vec<f64> {
        let line = text.lines().find(|l| l.starts_with(&format!("{key}:"))).unwrap();
        line.split_whitespace().skip(1).map(|t| t.parse().unwrap()).collect()
    };
    let m34 = |v: Vec<f64>| [[v[0], v[1], v[2], v[3]], [v[4], v[5], v[6], v[7]], [v[8], v[9], v[10], v[11]]];
    let r = values("R0_rect");
    let r0 = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
    (m34(values("P2")), r0, m34(values("Tr_velo_to_cam")))
}

#[test]
fn kitti_fixture_projection_matches_matrix_oracle() {
    let text = std::fs::read_to_string(kitti("000000.txt")).unwrap();
    let calib = Calibration::from_kitti_file(kitti("000000.txt")).unwrap();
    let (p2, r0, tr) = raw_matrices(&text);
    let cloud = read_velodyne_bin(kitti("000000.bin")).unwrap();
    assert_eq!(cloud.len(), 4);
    assert_eq!(cloud.points[0], Point::lidar(10.0, 1.5, f64::from(-0.8f32), 0.25));
    assert!(cloud.points.iter().all(|p| p.source == PointSource::Lidar));

    for p in cloud.points.iter().map(Point::position).chain([[12.0, -0.5, 0.3], [40.0, 6.0, -1.2]]) {
        let (uv, depth) = project_point(&p2, &r0, &tr, p);
        match calib.project(p) {
            Some(got) => {
                assert!(depth > 0.1);
                assert!((got[0] - uv[0]).abs() < 1e-6 && (got[1] - uv[1]).abs() < 1e-6, "{p:?}: {got:?} vs {uv:?}");
            }
            None => assert!(depth <= 0.1, "{p:?} dropped at depth {depth}"),
        }
    }
}

fn random_record(rng: &mut SeededRng, quarter_turns: bool) -> AugmentationRecord {
    let theta = if quarter_turns {
        [0.0, PI / 2.0, PI, -PI / 2.0][rng.below(4)]
    } else {
        rng.uniform_range(-PI, PI).max(-PI + 1e-9)
    };
    AugmentationRecord::new(theta, rng.uniform_range(0.95, 1.05), rng.bernoulli(0.5)).unwrap()
}

#[test]
fn projection_chain_is_invariant_to_recorded_augmentation() {
    let calib = Calibration::synthetic_kitti();
    let mut rng = SeededRng::new(6);
    let mut compared = 0usize;
    for trial in 0..100 {
        let record = random_record(&mut rng, trial % 2 == 0);
        let points: Vec<[f64; 3]> = (0..500)
            .map(|_| [rng.uniform_range(-10.0, 60.0), rng.uniform_range(-25.0, 25.0), rng.uniform_range(-2.5, 1.5)])
            .collect();
        let cell = 1 + (trial % 4) as u32;
        let plain = project_augmented_points(&points, &AugmentationRecord::identity(), &calib, cell);
        let augmented = project_augmented_points(&record.apply(&points), &record, &calib, cell);
        for (a, b) in plain.iter().zip(&augmented) {
            if let (Some(a), Some(b)) = (a, b) {
                assert_eq!(a, b, "record {record:?}");
                compared += 1;
            }
        }
    }
    assert!(compared > 10_000);
}

#[test]
fn voxel_projection_of_augmented_grid_matches_original() {
    // A grid symmetric about the sensor maps onto itself under quarter turns
    // and flips, so voxel centres correspond exactly.
    let grid = VoxelGridSpec::from_range([-16.0, -16.0, -2.0], [16.0, 16.0, 2.0], [0.5, 0.5, 0.5]).unwrap();
    let calib = Calibration::synthetic_kitti();
    let mut rng = SeededRng::new(9);
    let pts: Vec<Point> = (0..3000)
        .map(|_| Point::virtual_point(rng.uniform_range(-15.9, 15.9), rng.uniform_range(-15.9, 15.9), rng.uniform_range(-1.9, 1.9)))
        .collect();
    let cloud = SparsePointCloud::new(pts).unwrap();
    let base = voxelize(&cloud, &grid).unwrap();
    let base_h = project_voxels(&base, &AugmentationRecord::identity(), &calib, 2);
    for trial in 0..20 {
        let record = AugmentationRecord::new([0.0, PI / 2.0, PI, -PI / 2.0][trial % 4], 1.0, trial % 3 == 0).unwrap();
        let moved: Vec<Point> = cloud.points.iter().map(|p| p.with_position(record.apply_point(p.position()))).collect();
        let aug = voxelize(&SparsePointCloud::new(moved).unwrap(), &grid).unwrap();
        assert_eq!(aug.len(), base.len());
        let aug_h = project_voxels(&aug, &record, &calib, 2);
        let mut matched = 0;
        for (row, h) in aug_h.iter().enumerate() {
            let back = record.inverse_point(grid.center(aug.index(row)));
            let orig = base.find(grid.locate(back).unwrap()).expect("voxel maps back");
            assert_eq!(*h, base_h[orig]);
            matched += usize::from(h.is_some());
        }
        assert!(matched > 100);
    }
}
