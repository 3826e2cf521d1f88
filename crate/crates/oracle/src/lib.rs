//! Dense brute-force reference implementations. Everything here works on plain
//! arrays: sparse inputs are scattered into a dense grid, convolved at every
//! grid position, and read back at the sites of interest.
//!
//! Kernel slots are ordered lexicographically over `(dz, dy, dx)` in 3D and
//! `(dv, du)` in 2D; weights are `[slot][c_in][c_out]`.

/// Dense kernel parameters.
#[derive(Clone, Debug)]
pub struct DenseKernel<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub c_in: usize,
    pub c_out: usize,
}

impl DenseKernel<'_> {
    fn w(&self, slot: usize, ci: usize, co: usize) -> f64 {
        self.weight[(slot * self.c_in + ci) * self.c_out + co]
    }
}

/// `max |a - b| / max |b|`, 0 when both are all zero.
pub fn max_relative_error(actual: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    let diff = actual.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = expected.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

struct Grid3 {
    ext: [usize; 3],
    c: usize,
    data: Vec<f64>,
}

impl Grid3 {
    fn scatter(ext: [usize; 3], sites: &[[i32; 3]], features: &[f64], c: usize) -> Self {
        let mut data = vec![0.0; ext[0] * ext[1] * ext[2] * c];
        for (r, s) in sites.iter().enumerate() {
            let base = Self::flat(ext, *s).expect("site inside grid") * c;
            data[base..base + c].copy_from_slice(&features[r * c..(r + 1) * c]);
        }
        Self { ext, c, data }
    }

    fn flat(ext: [usize; 3], p: [i32; 3]) -> Option<usize> {
        if p.iter().zip(ext).any(|(&v, e)| v < 0 || v as usize >= e) {
            return None;
        }
        Some((p[0] as usize * ext[1] + p[1] as usize) * ext[2] + p[2] as usize)
    }

    fn at(&self, p: [i32; 3]) -> Option<&[f64]> {
        Self::flat(self.ext, p).map(|i| &self.data[i * self.c..(i + 1) * self.c])
    }
}

fn conv_at_3d(grid: &Grid3, k: &DenseKernel, center: [i32; 3], act: &dyn Fn(f64) -> f64) -> Vec<f64> {
    let mut out = k.bias.to_vec();
    let mut slot = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(x) = grid.at([center[0] + dx, center[1] + dy, center[2] + dz]) {
                    for (co, o) in out.iter_mut().enumerate() {
                        for (ci, xv) in x.iter().enumerate() {
                            *o += xv * k.w(slot, ci, co);
                        }
                    }
                }
                slot += 1;
            }
        }
    }
    out.into_iter().map(act).collect()
}

/// Dense 3x3x3 convolution (stride 1, zero padding) gathered at `sites`.
pub fn dense_conv3d(
    extent: [usize; 3],
    sites: &[[i32; 3]],
    features: &[f64],
    k: &DenseKernel,
    act: &dyn Fn(f64) -> f64,
) -> Vec<f64> {
    let grid = Grid3::scatter(extent, sites, features, k.c_in);
    // full dense output, then gather
    let mut dense = vec![0.0; extent[0] * extent[1] * extent[2] * k.c_out];
    for x in 0..extent[0] as i32 {
        for y in 0..extent[1] as i32 {
            for z in 0..extent[2] as i32 {
                let i = Grid3::flat(extent, [x, y, z]).unwrap();
                let v = conv_at_3d(&grid, k, [x, y, z], act);
                dense[i * k.c_out..(i + 1) * k.c_out].copy_from_slice(&v);
            }
        }
    }
    sites
        .iter()
        .flat_map(|s| {
            let i = Grid3::flat(extent, *s).unwrap();
            dense[i * k.c_out..(i + 1) * k.c_out].to_vec()
        })
        .collect()
}

/// Dense stride-2, padding-1 convolution. Returns output sites (sorted
/// `(x, y, z)` lexicographically, only those with an occupied child) and
/// their features.
pub fn dense_downsample(
    extent: [usize; 3],
    sites: &[[i32; 3]],
    features: &[f64],
    k: &DenseKernel,
    act: &dyn Fn(f64) -> f64,
) -> (Vec<[i32; 3]>, Vec<f64>) {
    let grid = Grid3::scatter(extent, sites, features, k.c_in);
    let out_ext = extent.map(|e| e.div_ceil(2));
    let mut occupied = vec![false; out_ext[0] * out_ext[1] * out_ext[2]];
    for s in sites {
        occupied[Grid3::flat(out_ext, s.map(|v| v.div_euclid(2))).unwrap()] = true;
    }
    let mut out_sites = Vec::new();
    let mut out = Vec::new();
    for x in 0..out_ext[0] as i32 {
        for y in 0..out_ext[1] as i32 {
            for z in 0..out_ext[2] as i32 {
                // every output position is computed; occupancy only selects
                let v = conv_at_3d(&grid, k, [2 * x, 2 * y, 2 * z], act);
                if occupied[Grid3::flat(out_ext, [x, y, z]).unwrap()] {
                    out_sites.push([x, y, z]);
                    out.extend(v);
                }
            }
        }
    }
    (out_sites, out)
}

/// Dense image-plane branch: max-pool voxel features per pixel cell on a
/// dense cell grid, convolve 3x3 with zero padding, read back per voxel.
/// Voxels without a cell receive `act(bias)`.
pub fn dense_branch2d(
    cells: &[Option<[i32; 2]>],
    features: &[f64],
    k: &DenseKernel,
    act: &dyn Fn(f64) -> f64,
) -> Vec<f64> {
    let c = k.c_in;
    let valid: Vec<[i32; 2]> = cells.iter().flatten().copied().collect();
    let empty: Vec<f64> = k.bias.iter().map(|&b| act(b)).collect();
    if valid.is_empty() {
        return cells.iter().flat_map(|_| empty.clone()).collect();
    }
    let u0 = valid.iter().map(|p| p[0]).min().unwrap() - 1;
    let v0 = valid.iter().map(|p| p[1]).min().unwrap() - 1;
    let w = (valid.iter().map(|p| p[0]).max().unwrap() - u0 + 2) as usize;
    let h = (valid.iter().map(|p| p[1]).max().unwrap() - v0 + 2) as usize;
    let mut pooled = vec![f64::NEG_INFINITY; w * h * c];
    let mut occ = vec![false; w * h];
    for (r, cell) in cells.iter().enumerate() {
        if let Some([u, v]) = *cell {
            let i = (v - v0) as usize * w + (u - u0) as usize;
            occ[i] = true;
            for ch in 0..c {
                pooled[i * c + ch] = pooled[i * c + ch].max(features[r * c + ch]);
            }
        }
    }
    for (i, o) in occ.iter().enumerate() {
        if !o {
            pooled[i * c..(i + 1) * c].fill(0.0);
        }
    }
    let mut conv = vec![0.0; w * h * k.c_out];
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let o = &mut conv[(v * w + u) * k.c_out..(v * w + u + 1) * k.c_out];
            o.copy_from_slice(k.bias);
            let mut slot = 0;
            for dv in -1i32..=1 {
                for du in -1i32..=1 {
                    let j = (v as i32 + dv) as usize * w + (u as i32 + du) as usize;
                    for (co, ov) in o.iter_mut().enumerate() {
                        for ci in 0..c {
                            *ov += pooled[j * c + ci] * k.w(slot, ci, co);
                        }
                    }
                    slot += 1;
                }
            }
            o.iter_mut().for_each(|x| *x = act(*x));
        }
    }
    cells
        .iter()
        .flat_map(|cell| match *cell {
            Some([u, v]) => {
                let i = (v - v0) as usize * w + (u - u0) as usize;
                conv[i * k.c_out..(i + 1) * k.c_out].to_vec()
            }
            None => empty.clone(),
        })
        .collect()
}

/// Both dense branches joined per row as `[3D, 2D]`.
pub fn dense_nrconv(
    extent: [usize; 3],
    sites: &[[i32; 3]],
    cells: &[Option<[i32; 2]>],
    features: &[f64],
    k3d: &DenseKernel,
    k2d: &DenseKernel,
    act: &dyn Fn(f64) -> f64,
) -> Vec<f64> {
    let a = dense_conv3d(extent, sites, features, k3d, act);
    let b = dense_branch2d(cells, features, k2d, act);
    let (ca, cb) = (k3d.c_out, k2d.c_out);
    (0..sites.len())
        .flat_map(|r| a[r * ca..(r + 1) * ca].iter().chain(&b[r * cb..(r + 1) * cb]).copied().collect::<Vec<_>>())
        .collect()
}

/// Row of `target` by linear scan.
pub fn linear_find(sites: &[[i32; 3]], target: [i32; 3]) -> Option<usize> {
    sites.iter().position(|s| *s == target)
}

/// `(offset, row)` pairs of all sites within Chebyshev distance 1 of
/// `sites[row]`, excluding itself, by scanning every site.
pub fn scan_neighbors(sites: &[[i32; 3]], row: usize) -> Vec<([i32; 3], usize)> {
    let c = sites[row];
    let mut out: Vec<([i32; 3], usize)> = sites
        .iter()
        .enumerate()
        .filter(|&(j, s)| j != row && (0..3).all(|a| (s[a] - c[a]).abs() <= 1))
        .map(|(j, s)| ([s[0] - c[0], s[1] - c[1], s[2] - c[2]], j))
        .collect();
    out.sort();
    out
}

/// Farthest point sampling by recomputing every point's distance to the whole
/// selected set at each step. Starts at row 0; ties go to the lowest row.
pub fn brute_fps(points: &[[f64; 3]], k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    if points.is_empty() || k == 0 {
        return chosen;
    }
    chosen.push(0);
    while chosen.len() < k.min(points.len()) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&j| {
                    let q = points[j];
                    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
                })
                .fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

/// Projects a homogeneous lidar point through `P * R0 * Tr` written out as
/// explicit sums. Returns pixel `(u, v)` and camera depth.
pub fn project_point(p2: &[[f64; 4]; 3], r0: &[[f64; 3]; 3], tr: &[[f64; 4]; 3], x: [f64; 3]) -> ([f64; 2], f64) {
    let h = [x[0], x[1], x[2], 1.0];
    let cam: Vec<f64> = (0..3).map(|i| (0..4).map(|j| tr[i][j] * h[j]).sum()).collect();
    let rect: Vec<f64> = (0..3).map(|i| (0..3).map(|j| r0[i][j] * cam[j]).sum()).collect();
    let hr = [rect[0], rect[1], rect[2], 1.0];
    let img: Vec<f64> = (0..3).map(|i| (0..4).map(|j| p2[i][j] * hr[j]).sum()).collect();
    ([img[0] / img[2], img[1] / img[2]], rect[2])
}

/// Regular grid for [`discard_bin_counts`].
#[derive(Clone, Copy, Debug)]
pub struct CountingGrid {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub extent: [u32; 3],
}

/// Bin layout and cap for [`discard_bin_counts`].
#[derive(Clone, Copy, Debug)]
pub struct CountingBins {
    pub num_bins: usize,
    pub bin_range: f64,
    pub nearby_limit: f64,
    pub keep: usize,
}

/// Per-bin `(before, after)` voxel counts of the capped discard, obtained by
/// counting: points are bucketed into cells, a cell is eligible when at
/// least half its points are virtual, cells are binned by the planar
/// distance of their centre, and every bin whose centre is within the limit
/// keeps at most `keep` eligible cells plus all ineligible ones. The last
/// entry is the overflow bin.
pub fn discard_bin_counts(points: &[([f64; 3], bool)], grid: CountingGrid, bins: CountingBins) -> Vec<(usize, usize)> {
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<[i64; 3], (usize, usize)> = BTreeMap::new();
    'points: for (p, is_virtual) in points {
        let mut key = [0i64; 3];
        for a in 0..3 {
            let f = ((p[a] - grid.origin[a]) / grid.voxel_size[a]).floor();
            if f < 0.0 || f >= grid.extent[a] as f64 {
                continue 'points;
            }
            key[a] = f as i64;
        }
        let e = cells.entry(key).or_default();
        if *is_virtual {
            e.1 += 1;
        } else {
            e.0 += 1;
        }
    }
    let width = bins.bin_range / bins.num_bins as f64;
    let mut eligible = vec![0usize; bins.num_bins + 1];
    let mut other = vec![0usize; bins.num_bins + 1];
    for (key, (lidar, virt)) in &cells {
        let cx = grid.origin[0] + (key[0] as f64 + 0.5) * grid.voxel_size[0];
        let cy = grid.origin[1] + (key[1] as f64 + 0.5) * grid.voxel_size[1];
        let d = (cx * cx + cy * cy).sqrt();
        let mut b = bins.num_bins;
        for i in 0..bins.num_bins {
            if d >= i as f64 * width && d < (i + 1) as f64 * width {
                b = i;
                break;
            }
        }
        if virt >= lidar {
            eligible[b] += 1;
        } else {
            other[b] += 1;
        }
    }
    (0..=bins.num_bins)
        .map(|b| {
            let nearby = b < bins.num_bins && (b as f64 + 0.5) * width <= bins.nearby_limit;
            let kept = if nearby { eligible[b].min(bins.keep) } else { eligible[b] };
            (eligible[b] + other[b], other[b] + kept)
        })
        .collect()
}
