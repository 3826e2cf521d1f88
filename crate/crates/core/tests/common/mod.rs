#![allow(dead_code)]

use virconv::conv::{Activation, ConvKernel};
use virconv::geometry::PixelCell;
use virconv::{FeatureMatrix, SeededRng, SparseVoxelTensor, VoxelGridSpec, VoxelIndex};
use virconv_oracle::DenseKernel;

/// Random scene on an `edge`^3 grid at the given occupancy, with random pixel
/// cells on a `cells x cells` plane and ~10% unprojected voxels.
pub fn scene(
    edge: u32,
    occupancy: f64,
    c_in: usize,
    rng: &mut SeededRng,
) -> (SparseVoxelTensor, Vec<Option<PixelCell>>) {
    let spec = VoxelGridSpec::new([0.0; 3], [0.1; 3], [edge; 3]).unwrap();
    let total = (edge * edge * edge) as usize;
    let n = ((total as f64 * occupancy).round() as usize).max(1);
    let mut rows = rng.sample_sorted(total, n);
    rng.shuffle(&mut rows);
    let e = edge as usize;
    let idx: Vec<VoxelIndex> = rows
        .iter()
        .map(|&p| VoxelIndex::new((p % e) as i32, ((p / e) % e) as i32, (p / (e * e)) as i32))
        .collect();
    let data = (0..n * c_in).map(|_| rng.normal()).collect();
    let t = SparseVoxelTensor::build(idx, FeatureMatrix::new(n, c_in, data).unwrap(), spec).unwrap();
    let side = ((n as f64).sqrt().ceil() as usize).max(2);
    let h2d = (0..n)
        .map(|_| {
            (!rng.bernoulli(0.1)).then(|| PixelCell::new(rng.below(side) as i32 - 3, rng.below(side) as i32 + 5))
        })
        .collect();
    (t, h2d)
}

pub fn kernel(offsets: usize, c_in: usize, c_out: usize, rng: &mut SeededRng) -> ConvKernel {
    let mut k = ConvKernel::glorot(offsets, c_in, c_out, rng);
    for b in &mut k.bias {
        *b = rng.uniform_range(-0.3, 0.3);
    }
    k
}

pub fn dense(k: &ConvKernel) -> DenseKernel<'_> {
    DenseKernel {
        weight: &k.weight,
        bias: &k.bias,
        c_in: k.c_in(),
        c_out: k.c_out(),
    }
}

pub fn act_fn(act: Activation) -> impl Fn(f64) -> f64 {
    move |x| act.apply(x)
}

pub fn sites(t: &SparseVoxelTensor) -> Vec<[i32; 3]> {
    t.indices().iter().map(|i| i.as_array()).collect()
}

pub fn extent(t: &SparseVoxelTensor) -> [usize; 3] {
    t.spec().extent.map(|e| e as usize)
}

pub fn cells(h2d: &[Option<PixelCell>]) -> Vec<Option<[i32; 2]>> {
    h2d.iter().map(|c| c.map(|c| [c.u, c.v])).collect()
}
