//! Central finite-difference check of the analytic backward passes.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::{
    Activation, Conv2dBranch, ConvError, ConvKernel, NrConv, NrConvWeights, SpconvDownsample, SubmanifoldConv3d,
    KERNEL_AREA_2D,
};
use crate::geometry::PixelCell;
use crate::rng::SeededRng;
use crate::tensor::{FeatureMatrix, SparseVoxelTensor, VoxelGridSpec, VoxelIndex, KERNEL_VOLUME_3D};

pub const FD_STEP: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_PROBES: usize = 100;
pub const DEFAULT_SIZE: usize = 64;
/// Denominator floor of the relative error; below it the comparison is
/// effectively absolute.
pub const RELATIVE_FLOOR: f64 = 1e-6;

const C_IN: usize = 3;
const C_OUT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOp {
    Conv3d,
    Conv2d,
    Nrconv,
    Spconv,
}

impl GradOp {
    pub const ALL: [GradOp; 4] = [GradOp::Conv3d, GradOp::Conv2d, GradOp::Nrconv, GradOp::Spconv];

    pub fn name(self) -> &'static str {
        match self {
            Self::Conv3d => "conv3d",
            Self::Conv2d => "conv2d",
            Self::Nrconv => "nrconv",
            Self::Spconv => "spconv",
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| format!("unknown op {s:?}, expected one of conv3d, conv2d, nrconv, spconv"))
    }
}

/// How the scalar loss is formed from the op output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Sum of all outputs.
    #[default]
    Sum,
    /// Fixed random linear combination of the outputs.
    RandomLinear,
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub op: GradOp,
    pub seed: u64,
    /// Number of active voxels.
    pub size: usize,
    pub probes: usize,
    pub loss: LossKind,
    pub act: Activation,
    /// Test hook: perturb analytic weight gradients to prove the check can fail.
    pub corrupt_weight_grad: bool,
}

impl GradcheckConfig {
    pub fn new(op: GradOp, seed: u64) -> Self {
        Self {
            op,
            seed,
            size: DEFAULT_SIZE,
            probes: DEFAULT_PROBES,
            loss: LossKind::Sum,
            act: Activation::Relu,
            corrupt_weight_grad: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub op: GradOp,
    pub seed: u64,
    pub size: usize,
    pub probes: usize,
    /// Probes redrawn because the perturbation crossed a kink.
    pub resampled: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

enum Layer {
    C3(SubmanifoldConv3d),
    C2(Conv2dBranch),
    Nr(NrConv),
    Down(SpconvDownsample),
}

impl Layer {
    fn forward(&mut self, t: &SparseVoxelTensor, h2d: &[Option<PixelCell>]) -> Result<FeatureMatrix, ConvError> {
        Ok(match self {
            Self::C3(l) => l.forward(t)?.features().clone(),
            Self::C2(l) => l.forward(t, h2d)?,
            Self::Nr(l) => l.forward(t, h2d)?.features().clone(),
            Self::Down(l) => l.forward(t)?.features().clone(),
        })
    }

    fn backward(&mut self, g: &FeatureMatrix) -> Result<FeatureMatrix, ConvError> {
        match self {
            Self::C3(l) => l.backward(g),
            Self::C2(l) => l.backward(g),
            Self::Nr(l) => l.backward(g),
            Self::Down(l) => l.backward(g),
        }
    }

    fn signature(&self) -> u64 {
        match self {
            Self::C3(l) => l.piecewise_signature(),
            Self::C2(l) => l.piecewise_signature(),
            Self::Nr(l) => l.piecewise_signature(),
            Self::Down(l) => l.piecewise_signature(),
        }
    }

    fn kernels_mut(&mut self) -> Vec<&mut ConvKernel> {
        match self {
            Self::C3(l) => vec![&mut l.kernel],
            Self::C2(l) => vec![&mut l.kernel],
            Self::Nr(l) => vec![&mut l.weights.k3d, &mut l.weights.k2d],
            Self::Down(l) => vec![&mut l.kernel],
        }
    }
}

/// What a probe perturbs.
#[derive(Clone, Copy, Debug)]
enum Target {
    Param { kernel: usize, index: usize },
    Input { index: usize },
}

/// Random test instance: `size` distinct voxels in a cube at about 30%
/// occupancy, normal features, and random pixel cells with some voxels
/// unprojected.
pub fn random_instance(size: usize, rng: &mut SeededRng) -> (SparseVoxelTensor, Vec<Option<PixelCell>>) {
    let edge = ((size as f64 / 0.3).cbrt().ceil() as u32).max(2);
    let spec = VoxelGridSpec::new([0.0; 3], [0.1; 3], [edge; 3]).expect("valid spec");
    let cells = (edge * edge * edge) as usize;
    let picked = rng.sample_sorted(cells, size.min(cells));
    let e = edge as usize;
    let idx: Vec<VoxelIndex> = picked
        .iter()
        .map(|&p| VoxelIndex::new((p % e) as i32, ((p / e) % e) as i32, (p / (e * e)) as i32))
        .collect();
    let n = idx.len();
    let data = (0..n * C_IN).map(|_| rng.normal()).collect();
    let t = SparseVoxelTensor::build(idx, FeatureMatrix::new(n, C_IN, data).expect("shape"), spec).expect("valid");
    let side = ((n as f64).sqrt().ceil() as usize).max(2);
    let h2d = (0..n)
        .map(|_| {
            if rng.bernoulli(0.1) {
                None
            } else {
                Some(PixelCell::new(rng.below(side) as i32, rng.below(side) as i32))
            }
        })
        .collect();
    (t, h2d)
}

fn random_kernel(offsets: usize, c_in: usize, c_out: usize, rng: &mut SeededRng) -> ConvKernel {
    let mut k = ConvKernel::glorot(offsets, c_in, c_out, rng);
    for b in &mut k.bias {
        *b = rng.uniform_range(-0.2, 0.2);
    }
    k
}

fn build_layer(op: GradOp, act: Activation, rng: &mut SeededRng) -> Result<Layer, ConvError> {
    Ok(match op {
        GradOp::Conv3d => Layer::C3(SubmanifoldConv3d::new(random_kernel(KERNEL_VOLUME_3D, C_IN, C_OUT, rng), act)?),
        GradOp::Conv2d => Layer::C2(Conv2dBranch::new(random_kernel(KERNEL_AREA_2D, C_IN, C_OUT, rng), act)?),
        GradOp::Nrconv => {
            let weights = NrConvWeights {
                k3d: random_kernel(KERNEL_VOLUME_3D, C_IN, C_OUT / 2, rng),
                k2d: random_kernel(KERNEL_AREA_2D, C_IN, C_OUT / 2, rng),
            };
            Layer::Nr(NrConv::new(weights, act)?)
        }
        GradOp::Spconv => Layer::Down(SpconvDownsample::new(random_kernel(KERNEL_VOLUME_3D, C_IN, C_OUT, rng), act)?),
    })
}

/// `sum coeff * (a - b)` taken elementwise so unchanged outputs cancel exactly.
fn loss_difference(a: &FeatureMatrix, b: &FeatureMatrix, coeff: &[f64]) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .zip(coeff)
        .map(|((x, y), c)| c * (x - y))
        .sum()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, ConvError> {
    cfg.act.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let (tensor, h2d) = random_instance(cfg.size.max(1), &mut rng.fork(1));
    let mut layer = build_layer(cfg.op, cfg.act, &mut rng.fork(2))?;

    let base = layer.forward(&tensor, &h2d)?;
    let mut coeff_rng = rng.fork(3);
    let coeff: Vec<f64> = match cfg.loss {
        LossKind::Sum => vec![1.0; base.as_slice().len()],
        LossKind::RandomLinear => (0..base.as_slice().len()).map(|_| coeff_rng.uniform_range(-1.0, 1.0)).collect(),
    };
    let base_sig = layer.signature();
    let upstream = FeatureMatrix::new(base.rows(), base.cols(), coeff.clone())?;
    for k in layer.kernels_mut() {
        k.zero_grad();
    }
    let grad_input = layer.backward(&upstream)?;
    if cfg.corrupt_weight_grad {
        for k in layer.kernels_mut() {
            for g in &mut k.grad_weight {
                *g += 1e-2 * g.abs().max(1.0);
            }
        }
    }

    let param_counts: Vec<usize> = layer.kernels_mut().iter().map(|k| k.num_params()).collect();
    let n_params: usize = param_counts.iter().sum();
    let n_inputs = tensor.features().as_slice().len();
    let total = n_params + n_inputs;

    let locate = |flat: usize| -> Target {
        let mut rem = flat;
        for (kernel, &count) in param_counts.iter().enumerate() {
            if rem < count {
                return Target::Param { kernel, index: rem };
            }
            rem -= count;
        }
        Target::Input { index: rem }
    };

    let mut probe_rng = rng.fork(4);
    let mut max_err = 0.0f64;
    let mut done = 0;
    let mut resampled = 0;
    let max_attempts = cfg.probes * 50 + 100;
    let mut attempts = 0;
    while done < cfg.probes && attempts < max_attempts {
        attempts += 1;
        let target = locate(probe_rng.below(total));
        let analytic = match target {
            Target::Param { kernel, index } => layer.kernels_mut()[kernel].grad(index),
            Target::Input { index } => grad_input.as_slice()[index],
        };
        let eval = |delta: f64, layer: &mut Layer| -> Result<(FeatureMatrix, u64), ConvError> {
            let mut t = tensor.clone();
            match target {
                Target::Param { kernel, index } => *layer.kernels_mut()[kernel].param_mut(index) += delta,
                Target::Input { index } => {
                    let mut f = tensor.features().clone();
                    f.as_mut_slice()[index] += delta;
                    t = tensor.with_features(f)?;
                }
            }
            let out = layer.forward(&t, &h2d);
            if let Target::Param { kernel, index } = target {
                *layer.kernels_mut()[kernel].param_mut(index) -= delta;
            }
            let out = out?;
            Ok((out, layer.signature()))
        };
        let (plus, sig_p) = eval(FD_STEP, &mut layer)?;
        let (minus, sig_m) = eval(-FD_STEP, &mut layer)?;
        if sig_p != base_sig || sig_m != base_sig {
            resampled += 1;
            continue;
        }
        let numeric = loss_difference(&plus, &minus, &coeff) / (2.0 * FD_STEP);
        max_err = max_err.max(relative_error(analytic, numeric));
        done += 1;
    }

    Ok(GradcheckReport {
        op: cfg.op,
        seed: cfg.seed,
        size: tensor.len(),
        probes: done,
        resampled,
        max_rel_error: max_err,
        tolerance: GRADCHECK_TOLERANCE,
        passed: done == cfg.probes && max_err < GRADCHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_names_round_trip() {
        for op in GradOp::ALL {
            assert_eq!(op.name().parse::<GradOp>().unwrap(), op);
        }
        assert!("conv4d".parse::<GradOp>().is_err());
    }

    #[test]
    fn all_ops_pass_with_random_loss() {
        for op in GradOp::ALL {
            let mut cfg = GradcheckConfig::new(op, 11);
            cfg.loss = LossKind::RandomLinear;
            cfg.size = 40;
            let r = run_gradcheck(&cfg).unwrap();
            assert!(r.passed, "{op}: {r:?}");
        }
    }

    #[test]
    fn leaky_relu_passes() {
        let mut cfg = GradcheckConfig::new(GradOp::Nrconv, 5);
        cfg.act = Activation::LeakyRelu(0.1);
        assert!(run_gradcheck(&cfg).unwrap().passed);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut cfg = GradcheckConfig::new(GradOp::Conv3d, 3);
        cfg.corrupt_weight_grad = true;
        let r = run_gradcheck(&cfg).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 1e-3);
    }

    #[test]
    fn single_voxel_passes() {
        for op in GradOp::ALL {
            let mut cfg = GradcheckConfig::new(op, 2);
            cfg.size = 1;
            let r = run_gradcheck(&cfg).unwrap();
            assert!(r.passed, "{op}: {r:?}");
        }
    }
}
