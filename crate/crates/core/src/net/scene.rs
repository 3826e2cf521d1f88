//! Synthetic street scenes: oriented boxes on a ground plane, a beam-pattern
//! LiDAR, and virtual points cast through every sampled image pixel, with
//! depth noise injected next to object silhouettes.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fuse_early, NetError};
use crate::geometry::kitti::{read_velodyne_bin, read_virtual_bin, write_bin};
use crate::geometry::{Calibration, Point, SparsePointCloud};
use crate::rng::SeededRng;
use crate::tensor::SparseVoxelTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub num_objects: usize,
    /// Box length, width and height ranges, metres.
    pub object_length: [f64; 2],
    pub object_width: [f64; 2],
    pub object_height: [f64; 2],
    /// Forward distance range of box centres, metres.
    pub object_range: [f64; 2],
    /// Ground height in the LiDAR frame.
    pub ground_z: f64,
    pub lidar_beams: u32,
    /// Lowest and highest beam elevation, degrees.
    pub lidar_elevation_deg: [f64; 2],
    /// Horizontal angular step; point density falls off with range as the
    /// beams fan out.
    pub lidar_azimuth_step_deg: f64,
    /// Horizontal field of view centred on +x, degrees.
    pub lidar_fov_deg: f64,
    pub lidar_max_range: f64,
    pub image_size: [u32; 2],
    /// Virtual samples per image pixel, on a regular sub-pixel lattice.
    pub virtual_density: f64,
    /// Camera-depth limit of the virtual points, metres.
    pub virtual_max_depth: f64,
    /// Gaussian depth jitter of every virtual point, metres.
    pub virtual_depth_sigma: f64,
    /// Fraction of boundary-adjacent virtual points that get displaced.
    pub boundary_noise_rate: f64,
    /// Largest displacement along the camera ray, metres.
    pub noise_magnitude: f64,
    /// A pixel is boundary-adjacent when a different surface, one of them an
    /// object, lies within this many pixels.
    pub noise_band_px: u32,
    /// Edge of the image blocks that are displaced together, pixels.
    pub noise_patch_px: u32,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            num_objects: 8,
            object_length: [3.5, 4.6],
            object_width: [1.6, 1.9],
            object_height: [1.4, 1.7],
            object_range: [6.0, 45.0],
            ground_z: -1.73,
            lidar_beams: 64,
            lidar_elevation_deg: [-24.8, 2.0],
            lidar_azimuth_step_deg: 0.08,
            lidar_fov_deg: 180.0,
            lidar_max_range: 120.0,
            image_size: [1242, 375],
            virtual_density: 1.0,
            virtual_max_depth: 70.0,
            virtual_depth_sigma: 0.02,
            boundary_noise_rate: 0.3,
            noise_magnitude: 1.5,
            noise_band_px: 2,
            noise_patch_px: 8,
        }
    }
}

impl SyntheticSceneSpec {
    /// Most virtual voxels fall within 30 m: objects close by, virtual depth
    /// capped at 40 m.
    pub fn nearby_heavy() -> Self {
        Self {
            num_objects: 10,
            object_range: [6.0, 28.0],
            virtual_max_depth: 40.0,
            ..Self::default()
        }
    }

    /// [`Self::nearby_heavy`] with twice the virtual sampling density.
    pub fn dense() -> Self {
        Self {
            virtual_density: 2.0,
            ..Self::nearby_heavy()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::Spec(format!("scene spec: {m}")));
        let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if ![self.object_length, self.object_width, self.object_height, self.object_range]
            .into_iter()
            .all(range_ok)
        {
            return bad("object ranges must be positive and ordered");
        }
        if self.lidar_beams == 0 || !(self.lidar_azimuth_step_deg > 0.0) || !(self.lidar_max_range > 0.0) {
            return bad("lidar density parameters must be positive");
        }
        if !(self.lidar_fov_deg > 0.0 && self.lidar_fov_deg <= 360.0) {
            return bad("lidar field of view must be in (0, 360]");
        }
        if self.lidar_elevation_deg[0] > self.lidar_elevation_deg[1] {
            return bad("lidar elevation range must be ordered");
        }
        if !(self.virtual_density > 0.0) || !(self.virtual_max_depth > 0.0) || self.image_size.contains(&0) {
            return bad("virtual density parameters must be positive");
        }
        if !(0.0..=1.0).contains(&self.boundary_noise_rate) {
            return bad("boundary noise rate must be in [0, 1]");
        }
        if !(self.noise_magnitude >= 0.0) || !(self.virtual_depth_sigma >= 0.0) {
            return bad("noise magnitudes must be non-negative");
        }
        if self.noise_band_px == 0 || self.noise_patch_px == 0 {
            return bad("noise band and patch sizes must be positive");
        }
        Ok(())
    }
}

/// Oriented box standing on the ground.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: [f64; 3],
    /// Length (along heading), width, height.
    pub size: [f64; 3],
    pub yaw: f64,
}

impl SceneBox {
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (s, c) = self.yaw.sin_cos();
        let mut out = [[0.0; 3]; 8];
        for (i, o) in out.iter_mut().enumerate() {
            let lx = if i & 1 == 0 { -0.5 } else { 0.5 } * self.size[0];
            let ly = if i & 2 == 0 { -0.5 } else { 0.5 } * self.size[1];
            let lz = if i & 4 == 0 { -0.5 } else { 0.5 } * self.size[2];
            *o = [
                self.center[0] + c * lx - s * ly,
                self.center[1] + s * lx + c * ly,
                self.center[2] + lz,
            ];
        }
        out
    }

    /// Entry distance of a ray into the box, if it hits at `t > eps`.
    fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let (s, c) = self.yaw.sin_cos();
        let rel = [o[0] - self.center[0], o[1] - self.center[1], o[2] - self.center[2]];
        // rotate into the box frame by -yaw
        let lo = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
        let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            let h = 0.5 * self.size[a];
            if ld[a].abs() < 1e-15 {
                if lo[a].abs() > h {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((-h - lo[a]) / ld[a], (h - lo[a]) / ld[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1 && t0 > 1e-9).then_some(t0)
    }
}

/// What a ray hit: 0 ground, `k + 1` box `k`.
type SurfaceId = u32;
const GROUND: SurfaceId = 0;

fn cast(o: [f64; 3], d: [f64; 3], boxes: &[SceneBox], ground_z: f64) -> Option<(f64, SurfaceId)> {
    let mut best: Option<(f64, SurfaceId)> = None;
    if d[2] < 0.0 {
        let t = (ground_z - o[2]) / d[2];
        if t > 0.0 {
            best = Some((t, GROUND));
        }
    }
    for (k, b) in boxes.iter().enumerate() {
        if let Some(t) = b.intersect(o, d) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, k as SurfaceId + 1));
            }
        }
    }
    best
}

fn is_box(id: Option<SurfaceId>) -> bool {
    matches!(id, Some(i) if i != GROUND)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SyntheticSceneSpec,
    pub seed: u64,
    pub calib: Calibration,
    pub lidar: SparsePointCloud,
    pub virtual_points: SparsePointCloud,
    /// One flag per virtual point.
    pub noise: Vec<bool>,
    /// Virtual points inside the silhouette band, the candidates for noise.
    pub boundary: Vec<bool>,
    pub boxes: Vec<SceneBox>,
}

fn place_boxes(spec: &SyntheticSceneSpec, calib: &Calibration, rng: &mut SeededRng) -> Result<Vec<SceneBox>, NetError> {
    const ATTEMPTS_PER_OBJECT: usize = 2_000;
    let [w, h] = spec.image_size.map(f64::from);
    let mut boxes: Vec<SceneBox> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < spec.num_objects {
        attempts += 1;
        if attempts > ATTEMPTS_PER_OBJECT * spec.num_objects.max(1) {
            return Err(NetError::Placement {
                placed: boxes.len(),
                requested: spec.num_objects,
            });
        }
        let size = [
            rng.uniform_range(spec.object_length[0], spec.object_length[1]),
            rng.uniform_range(spec.object_width[0], spec.object_width[1]),
            rng.uniform_range(spec.object_height[0], spec.object_height[1]),
        ];
        let x = rng.uniform_range(spec.object_range[0], spec.object_range[1]);
        let y = rng.uniform_range(-0.8, 0.8) * x;
        let yaw = rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI);
        let b = SceneBox {
            center: [x, y, spec.ground_z + 0.5 * size[2]],
            size,
            yaw,
        };
        // whole footprint in front of the camera and its centre in the image
        let in_view = calib
            .project(b.center)
            .is_some_and(|[u, v]| (0.0..w).contains(&u) && (0.0..h).contains(&v))
            && b.corners().iter().all(|c| calib.to_camera(*c).z > 1.0);
        let radius = 0.5 * size[0].hypot(size[1]);
        let clear = boxes.iter().all(|o| {
            let r = 0.5 * o.size[0].hypot(o.size[1]);
            (o.center[0] - x).hypot(o.center[1] - y) > radius + r + 0.5
        });
        if in_view && clear {
            boxes.push(b);
        }
    }
    Ok(boxes)
}

fn simulate_lidar(spec: &SyntheticSceneSpec, boxes: &[SceneBox], rng: &mut SeededRng) -> SparsePointCloud {
    let beams = spec.lidar_beams as usize;
    let n_az = (spec.lidar_fov_deg / spec.lidar_azimuth_step_deg).round().max(1.0) as usize;
    let [e0, e1] = spec.lidar_elevation_deg;
    let hits: Vec<Option<(f64, SurfaceId, [f64; 3])>> = (0..beams * n_az)
        .into_par_iter()
        .map(|i| {
            let (b, a) = (i / n_az, i % n_az);
            let elev = if beams == 1 { e0 } else { e0 + (e1 - e0) * b as f64 / (beams - 1) as f64 };
            let az = -0.5 * spec.lidar_fov_deg + (a as f64 + 0.5) * spec.lidar_azimuth_step_deg;
            let (el, az) = (elev.to_radians(), az.to_radians());
            let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            cast([0.0; 3], d, boxes, spec.ground_z)
                .filter(|(t, _)| *t <= spec.lidar_max_range)
                .map(|(t, id)| (t, id, d))
        })
        .collect();
    let box_intensity: Vec<f64> = boxes.iter().map(|_| rng.uniform_range(0.3, 0.8)).collect();
    let mut points = Vec::new();
    for (t, id, d) in hits.into_iter().flatten() {
        let t = t + 0.01 * rng.normal();
        let base = if id == GROUND { 0.15 } else { box_intensity[id as usize - 1] };
        let intensity = (base + 0.05 * rng.normal()).clamp(0.0, 1.0);
        points.push(Point::lidar(t * d[0], t * d[1], t * d[2], intensity));
    }
    SparsePointCloud { points }
}

struct VirtualSample {
    u: f64,
    v: f64,
    origin: [f64; 3],
    dir: [f64; 3],
    t: f64,
    /// Depth of the most different nearby surface, for boundary samples.
    other_t: Option<f64>,
}

/// Smooth random field in `[0, 1]`: bilinear interpolation of uniform values
/// on a square lattice.
struct ValueNoise {
    cols: usize,
    cell: f64,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(width: f64, height: f64, cell: f64, rng: &mut SeededRng) -> Self {
        let cols = (width / cell).ceil() as usize + 2;
        let rows = (height / cell).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.uniform()).collect();
        Self { cols, cell, values }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let (x, y) = ((u / self.cell).max(0.0), (v / self.cell).max(0.0));
        let (i, j) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (x - i as f64, y - j as f64);
        let g = |a: usize, b: usize| self.values[(b * self.cols + a).min(self.values.len() - 1)];
        let top = g(i, j) * (1.0 - fx) + g(i + 1, j) * fx;
        let bottom = g(i, j + 1) * (1.0 - fx) + g(i + 1, j + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Virtual points with depth-completion style boundary noise: inside a band
/// around object silhouettes, whole image patches have their depth pulled
/// toward the neighbouring surface by a smoothly varying fraction, so the
/// displaced points form continuous sheets rather than isolated outliers.
fn simulate_virtual(
    spec: &SyntheticSceneSpec,
    calib: &Calibration,
    boxes: &[SceneBox],
    rng: &mut SeededRng,
) -> (SparsePointCloud, Vec<bool>, Vec<bool>) {
    let step = 1.0 / spec.virtual_density.sqrt();
    let [width, height] = spec.image_size.map(f64::from);
    let cols = (width / step).floor() as usize;
    let rows = (height / step).floor() as usize;
    let band = spec.noise_band_px as i32;
    let hit = |u: f64, v: f64| {
        let (o, d) = calib.pixel_ray(u, v);
        cast(o, d, boxes, spec.ground_z)
    };
    let samples: Vec<Option<VirtualSample>> = (0..rows * cols)
        .into_par_iter()
        .map(|i| {
            let (u, v) = ((i % cols) as f64 * step + 0.5 * step, (i / cols) as f64 * step + 0.5 * step);
            let (o, d) = calib.pixel_ray(u, v);
            let (t, id) = cast(o, d, boxes, spec.ground_z)?;
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            if calib.to_camera(p).z > spec.virtual_max_depth {
                return None;
            }
            let mut other_t: Option<f64> = None;
            for dv in -band..=band {
                for du in -band..=band {
                    let other = hit(u + f64::from(du), v + f64::from(dv));
                    let other_id = other.map(|(_, k)| k);
                    if other_id != Some(id) && (id != GROUND || is_box(other_id)) {
                        // sky counts as a surface at the depth limit
                        let ot = other.map_or(t + spec.noise_magnitude, |(ot, _)| ot);
                        if other_t.is_none_or(|cur| (ot - t).abs() > (cur - t).abs()) {
                            other_t = Some(ot);
                        }
                    }
                }
            }
            Some(VirtualSample { u, v, origin: o, dir: d, t, other_t })
        })
        .collect();

    let patch = f64::from(spec.noise_patch_px);
    let patch_cols = (width / patch).ceil() as usize;
    let patch_rows = (height / patch).ceil() as usize;
    let displaced_patch: Vec<bool> =
        (0..patch_cols * patch_rows).map(|_| rng.bernoulli(spec.boundary_noise_rate)).collect();
    let fraction = ValueNoise::new(width, height, 2.0 * patch, rng);

    let mut points = Vec::new();
    let mut noise = Vec::new();
    let mut boundary = Vec::new();
    for s in samples.into_iter().flatten() {
        boundary.push(s.other_t.is_some());
        let mut t = s.t + spec.virtual_depth_sigma * rng.normal();
        let pi = (s.v / patch) as usize * patch_cols + (s.u / patch) as usize;
        let displaced = match s.other_t {
            Some(ot) if displaced_patch[pi.min(displaced_patch.len() - 1)] => {
                let alpha = 0.15 + 0.7 * fraction.at(s.u, s.v);
                t += alpha * (ot - s.t).clamp(-spec.noise_magnitude, spec.noise_magnitude);
                true
            }
            _ => false,
        };
        let t = t.max(0.5);
        let p = [s.origin[0] + t * s.dir[0], s.origin[1] + t * s.dir[1], s.origin[2] + t * s.dir[2]];
        points.push(Point::virtual_point(p[0], p[1], p[2]));
        noise.push(displaced);
    }
    (SparsePointCloud { points }, noise, boundary)
}

pub fn generate_scene(spec: &SyntheticSceneSpec, calib: &Calibration, seed: u64) -> Result<Scene, NetError> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let boxes = place_boxes(spec, calib, &mut rng.fork(1))?;
    let lidar = simulate_lidar(spec, &boxes, &mut rng.fork(2));
    let (virtual_points, noise, boundary) = simulate_virtual(spec, calib, &boxes, &mut rng.fork(3));
    Ok(Scene {
        spec: spec.clone(),
        seed,
        calib: calib.clone(),
        lidar,
        virtual_points,
        noise,
        boundary,
        boxes,
    })
}

/// Per-voxel labels `(noise, candidate)`: a voxel is noisy when most of its
/// virtual points were displaced, and a candidate when any of its virtual
/// points lies in the silhouette band.
pub fn voxel_noise_labels(scene: &Scene, tensor: &SparseVoxelTensor) -> (Vec<bool>, Vec<bool>) {
    let mut noisy = vec![0u32; tensor.len()];
    let mut total = vec![0u32; tensor.len()];
    let mut candidate = vec![false; tensor.len()];
    for ((p, &n), &b) in scene.virtual_points.points.iter().zip(&scene.noise).zip(&scene.boundary) {
        let Some(idx) = tensor.spec().locate(p.position()) else { continue };
        if let Some(row) = tensor.find(idx) {
            total[row] += 1;
            noisy[row] += u32::from(n);
            candidate[row] |= b;
        }
    }
    let labels = noisy.iter().zip(&total).map(|(&n, &t)| t > 0 && 2 * n > t).collect();
    (labels, candidate)
}

impl Scene {
    pub fn fused(&self) -> SparsePointCloud {
        fuse_early(&self.lidar, &self.virtual_points).expect("generated sources carry correct flags")
    }

    pub fn noise_count(&self) -> usize {
        self.noise.iter().filter(|&&n| n).count()
    }
}

fn flagged(flags: &[bool]) -> Vec<usize> {
    flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
}

fn unflag(indices: &[usize], len: usize, path: &Path) -> Result<Vec<bool>, NetError> {
    let mut flags = vec![false; len];
    for &i in indices {
        *flags
            .get_mut(i)
            .ok_or_else(|| NetError::format(path, format!("point index {i} out of range")))? = true;
    }
    Ok(flags)
}

#[derive(Serialize, Deserialize)]
struct Labels {
    /// Indices into virtual.bin of displaced points, ascending.
    noise_indices: Vec<usize>,
    /// Indices into virtual.bin of points in the silhouette band, ascending.
    boundary_indices: Vec<usize>,
    boxes: Vec<SceneBox>,
}

#[derive(Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub config_hash: String,
    pub lidar_points: usize,
    pub virtual_points: usize,
    pub noise_points: usize,
    pub spec: SyntheticSceneSpec,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), NetError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| NetError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, NetError> {
    let text = fs::read_to_string(path).map_err(|e| NetError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| NetError::format(path, e.to_string()))
}

/// Writes `lidar.bin`, `virtual.bin`, `labels.json`, `meta.json` and
/// `calib.txt` into `dir`.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<(), NetError> {
    fs::create_dir_all(dir).map_err(|e| NetError::io(dir, e))?;
    write_bin(dir.join("lidar.bin"), &scene.lidar)?;
    write_bin(dir.join("virtual.bin"), &scene.virtual_points)?;
    let labels = Labels {
        noise_indices: flagged(&scene.noise),
        boundary_indices: flagged(&scene.boundary),
        boxes: scene.boxes.clone(),
    };
    write_json(&dir.join("labels.json"), &labels)?;
    let meta = SceneMeta {
        seed: scene.seed,
        config_hash: crate::config_hash(&(&scene.spec, scene.seed)),
        lidar_points: scene.lidar.len(),
        virtual_points: scene.virtual_points.len(),
        noise_points: scene.noise_count(),
        spec: scene.spec.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    let calib = dir.join("calib.txt");
    fs::write(&calib, scene.calib.to_kitti_string()).map_err(|e| NetError::io(calib, e))
}

/// Reads a scene directory written by [`write_scene`]. Coordinates come back
/// at the single precision of the binary point format.
pub fn read_scene(dir: &Path) -> Result<Scene, NetError> {
    let lidar = read_velodyne_bin(dir.join("lidar.bin"))?;
    let virtual_points = read_virtual_bin(dir.join("virtual.bin"))?;
    let labels: Labels = read_json(&dir.join("labels.json"))?;
    let meta: SceneMeta = read_json(&dir.join("meta.json"))?;
    let calib = Calibration::from_kitti_file(dir.join("calib.txt"))?;
    let labels_path = dir.join("labels.json");
    let noise = unflag(&labels.noise_indices, virtual_points.len(), &labels_path)?;
    let boundary = unflag(&labels.boundary_indices, virtual_points.len(), &labels_path)?;
    Ok(Scene {
        spec: meta.spec,
        seed: meta.seed,
        calib,
        lidar,
        virtual_points,
        noise,
        boundary,
        boxes: labels.boxes,
    })
}
