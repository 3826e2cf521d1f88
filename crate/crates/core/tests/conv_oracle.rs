mod common;

use common::*;
use virconv::conv::{
    conv2d_branch, nrconv, spconv_downsample, submanifold_conv3d, Activation, NrConvWeights, CENTER_OFFSET_2D,
};
use virconv::geometry::PixelCell;
use virconv::{FeatureMatrix, SeededRng, SparseVoxelTensor, VoxelGridSpec, VoxelIndex};
use virconv_oracle::{dense_branch2d, dense_conv3d, dense_downsample, dense_nrconv, max_relative_error};

const TOL: f64 = 1e-5;
const ACTS: [Activation; 3] = [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Identity];

#[test]
fn conv3d_matches_dense() {
    let mut rng = SeededRng::new(100);
    for trial in 0..12 {
        let (t, _) = scene(8 + trial % 5, 0.3, 3, &mut rng);
        let k = kernel(27, 3, 5, &mut rng);
        let act = ACTS[trial as usize % 3];
        let out = submanifold_conv3d(&t, &k, act).unwrap();
        let expect = dense_conv3d(extent(&t), &sites(&t), t.features().as_slice(), &dense(&k), &act_fn(act));
        assert!(max_relative_error(out.features().as_slice(), &expect) < TOL);
    }
}

#[test]
fn branch2d_matches_dense() {
    let mut rng = SeededRng::new(101);
    for trial in 0..12 {
        let (t, h2d) = scene(6 + trial % 4, 0.3, 4, &mut rng);
        let k = kernel(9, 4, 3, &mut rng);
        let act = ACTS[trial as usize % 3];
        let out = conv2d_branch(&t, &h2d, &k, act).unwrap();
        let expect = dense_branch2d(&cells(&h2d), t.features().as_slice(), &dense(&k), &act_fn(act));
        assert!(max_relative_error(out.as_slice(), &expect) < TOL);
    }
}

#[test]
fn nrconv_matches_dense() {
    let mut rng = SeededRng::new(102);
    for trial in 0..8 {
        let (t, h2d) = scene(6, 0.3, 3, &mut rng);
        let w = NrConvWeights {
            k3d: kernel(27, 3, 2, &mut rng),
            k2d: kernel(9, 3, 2, &mut rng),
        };
        let act = ACTS[trial % 3];
        let out = nrconv(&t, &h2d, &w, act).unwrap();
        let expect = dense_nrconv(
            extent(&t),
            &sites(&t),
            &cells(&h2d),
            t.features().as_slice(),
            &dense(&w.k3d),
            &dense(&w.k2d),
            &act_fn(act),
        );
        assert!(max_relative_error(out.features().as_slice(), &expect) < TOL);
    }
}

#[test]
fn downsample_matches_dense() {
    let mut rng = SeededRng::new(103);
    for trial in 0..12 {
        let (t, _) = scene(7 + trial % 6, 0.3, 2, &mut rng);
        let k = kernel(27, 2, 4, &mut rng);
        let act = ACTS[trial as usize % 3];
        let out = spconv_downsample(&t, &k, act).unwrap();
        let (osites, expect) = dense_downsample(extent(&t), &sites(&t), t.features().as_slice(), &dense(&k), &act_fn(act));
        assert_eq!(sites(&out), osites);
        assert!(max_relative_error(out.features().as_slice(), &expect) < TOL);
        assert_eq!(out.spec().extent, t.spec().extent.map(|e| e.div_ceil(2)));
    }
}

#[test]
fn row_permutation_is_equivariant() {
    let mut rng = SeededRng::new(104);
    let (t, h2d) = scene(8, 0.3, 3, &mut rng);
    let w = NrConvWeights {
        k3d: kernel(27, 3, 4, &mut rng),
        k2d: kernel(9, 3, 4, &mut rng),
    };
    let out = nrconv(&t, &h2d, &w, Activation::Relu).unwrap();
    let mut perm: Vec<usize> = (0..t.len()).collect();
    rng.shuffle(&mut perm);
    let idx = perm.iter().map(|&r| t.index(r)).collect();
    let pt = SparseVoxelTensor::build(idx, t.features().select_rows(&perm), t.spec().clone()).unwrap();
    let ph: Vec<_> = perm.iter().map(|&r| h2d[r]).collect();
    let pout = nrconv(&pt, &ph, &w, Activation::Relu).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        assert_eq!(pout.feature_row(new), out.feature_row(old));
    }
}

/// Two voxels with the same occupied 3D neighborhood and equal features but
/// different image-plane neighborhoods.
#[test]
fn image_plane_context_separates_identical_3d_neighborhoods() {
    let spec = VoxelGridSpec::new([0.0; 3], [0.1; 3], [16, 16, 16]).unwrap();
    let idx = vec![
        VoxelIndex::new(2, 2, 2),
        VoxelIndex::new(3, 2, 2),
        VoxelIndex::new(10, 10, 10),
        VoxelIndex::new(11, 10, 10),
        // far from both in 3D, adjacent to voxel 2 on the image plane
        VoxelIndex::new(6, 14, 3),
    ];
    let f = FeatureMatrix::from_rows(&[
        [1.0, 0.5],
        [0.2, -0.4],
        [1.0, 0.5],
        [0.2, -0.4],
        [0.9, 0.9],
    ])
    .unwrap();
    let t = SparseVoxelTensor::build(idx, f, spec).unwrap();
    let h2d = vec![
        Some(PixelCell::new(0, 0)),
        Some(PixelCell::new(1, 0)),
        Some(PixelCell::new(20, 20)),
        Some(PixelCell::new(21, 20)),
        Some(PixelCell::new(20, 21)),
    ];
    let mut rng = SeededRng::new(5);
    let w = NrConvWeights {
        k3d: kernel(27, 2, 2, &mut rng),
        k2d: kernel(9, 2, 2, &mut rng),
    };
    let act = Activation::LeakyRelu(0.1);
    let a3 = submanifold_conv3d(&t, &w.k3d, act).unwrap();
    assert_eq!(a3.feature_row(0), a3.feature_row(2));
    let nr = nrconv(&t, &h2d, &w, act).unwrap();
    assert_ne!(nr.feature_row(0), nr.feature_row(2));
    assert_eq!(&nr.feature_row(0)[..2], &nr.feature_row(2)[..2]);
    let _ = CENTER_OFFSET_2D;
}
