//! Per-voxel noise classifier: one convolution layer (NRConv or submanifold
//! 3D) followed by a per-voxel linear head, trained with a class-balanced
//! logistic loss by full-batch gradient descent.
//!
//! Only candidate voxels (those holding virtual points in a silhouette band)
//! are scored; everything else is context for the convolution.

use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, voxel_noise_labels, Scene, SyntheticSceneSpec};
use super::NetError;
use crate::conv::{Activation, ConvKernel, NrConv, NrConvWeights, SubmanifoldConv3d};
use crate::geometry::{project_voxels, Calibration, voxelize, AugmentationRecord, PixelCell, POINT_FEATURES};
use crate::rng::SeededRng;
use crate::tensor::{FeatureMatrix, SparseVoxelTensor, VoxelGridSpec, KERNEL_VOLUME_3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Nrconv,
    Conv3d,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub head: HeadKind,
    /// Output width of the convolution layer.
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Train on randomly permuted labels (null-model control).
    pub shuffle_labels: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Nrconv,
            hidden: 16,
            epochs: 100,
            lr: 0.5,
            shuffle_labels: false,
        }
    }
}

/// The fixed scenes and grid the two heads are compared on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseStudy {
    pub scene: SyntheticSceneSpec,
    pub grid: VoxelGridSpec,
    pub pixel_cell: u32,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
}

impl Default for NoiseStudy {
    fn default() -> Self {
        Self {
            scene: SyntheticSceneSpec {
                boundary_noise_rate: 0.5,
                ..SyntheticSceneSpec::nearby_heavy()
            },
            grid: VoxelGridSpec::from_range([0.0, -20.0, -3.0], [40.0, 20.0, 1.0], [0.05, 0.05, 0.1])
                .expect("valid grid"),
            pixel_cell: 4,
            train_seeds: vec![100, 101, 102],
            eval_seeds: vec![103, 104],
        }
    }
}

impl NoiseStudy {
    /// `(train, eval)` samples.
    pub fn samples(&self, calib: &Calibration) -> Result<(Vec<VoxelSample>, Vec<VoxelSample>), NetError> {
        let build = |seeds: &[u64]| -> Result<Vec<VoxelSample>, NetError> {
            seeds
                .iter()
                .map(|&seed| VoxelSample::from_scene(&generate_scene(&self.scene, calib, seed)?, &self.grid, self.pixel_cell))
                .collect()
        };
        Ok((build(&self.train_seeds)?, build(&self.eval_seeds)?))
    }
}

/// A voxelized scene ready for the classifier.
#[derive(Clone, Debug)]
pub struct VoxelSample {
    pub tensor: SparseVoxelTensor,
    pub h2d: Vec<Option<PixelCell>>,
    pub labels: Vec<bool>,
    /// Voxels that enter the loss and the metrics; the rest only provide
    /// context to the convolution.
    pub mask: Vec<bool>,
}

impl VoxelSample {
    pub fn from_scene(scene: &Scene, grid: &VoxelGridSpec, pixel_cell: u32) -> Result<Self, NetError> {
        let tensor = with_range_channels(&voxelize(&scene.fused(), grid)?)?;
        let (labels, mask) = voxel_noise_labels(scene, &tensor);
        let h2d = project_voxels(&tensor, &AugmentationRecord::identity(), &scene.calib, pixel_cell);
        Ok(Self { tensor, h2d, labels, mask })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().zip(&self.mask).filter(|&(&l, &m)| l && m).count()
    }

    pub fn candidates(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Voxel features plus the two range channels.
pub const INPUT_WIDTH: usize = POINT_FEATURES + 2;

/// Appends sensor range and its negation, so that per-cell max pooling can
/// expose both the nearest and the farthest surface.
fn with_range_channels(t: &SparseVoxelTensor) -> Result<SparseVoxelTensor, NetError> {
    let c = t.width();
    let mut f = FeatureMatrix::zeros(t.len(), c + 2);
    for (i, row) in t.features().iter_rows().enumerate() {
        let r = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        let out = f.row_mut(i);
        out[..c].copy_from_slice(row);
        out[c] = r;
        out[c + 1] = -r;
    }
    Ok(t.with_features(f)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifierMetrics {
    pub head: HeadKind,
    pub shuffled: bool,
    pub epochs: usize,
    pub final_loss: f64,
    pub train_auc: f64,
    pub eval_auc: f64,
    pub eval_voxels: usize,
    pub eval_positives: usize,
}

/// Area under the ROC curve by the rank-sum formula, ties counted half.
/// Returns 0.5 when one class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie group
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&r| labels[r]).count() as f64 * avg;
        i = j + 1;
    }
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

enum Layer {
    Nr(NrConv),
    C3(SubmanifoldConv3d),
}

struct Model {
    layer: Layer,
    head_w: Vec<f64>,
    head_b: f64,
}

impl Model {
    fn new(cfg: &ClassifierConfig, rng: &mut SeededRng) -> Result<Self, NetError> {
        let act = Activation::Relu;
        let layer = match cfg.head {
            HeadKind::Nrconv => Layer::Nr(NrConv::new(NrConvWeights::glorot(INPUT_WIDTH, cfg.hidden, rng)?, act)?),
            HeadKind::Conv3d => Layer::C3(SubmanifoldConv3d::new(
                ConvKernel::glorot(KERNEL_VOLUME_3D, INPUT_WIDTH, cfg.hidden, rng),
                act,
            )?),
        };
        let limit = (6.0 / (cfg.hidden as f64 + 1.0)).sqrt();
        let head_w = (0..cfg.hidden).map(|_| rng.uniform_range(-limit, limit)).collect();
        Ok(Self { layer, head_w, head_b: 0.0 })
    }

    fn hidden(&mut self, s: &VoxelSample) -> Result<FeatureMatrix, NetError> {
        Ok(match &mut self.layer {
            Layer::Nr(l) => l.forward(&s.tensor, &s.h2d)?.features().clone(),
            Layer::C3(l) => l.forward(&s.tensor)?.features().clone(),
        })
    }

    fn scores(&self, h: &FeatureMatrix) -> Vec<f64> {
        h.iter_rows()
            .map(|r| self.head_b + r.iter().zip(&self.head_w).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    fn kernels(&mut self) -> Vec<&mut ConvKernel> {
        match &mut self.layer {
            Layer::Nr(l) => vec![&mut l.weights.k3d, &mut l.weights.k2d],
            Layer::C3(l) => vec![&mut l.kernel],
        }
    }

    fn backward(&mut self, g: &FeatureMatrix) -> Result<(), NetError> {
        match &mut self.layer {
            Layer::Nr(l) => l.backward(g)?,
            Layer::C3(l) => l.backward(g)?,
        };
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-channel mean and standard deviation over all training voxels.
fn fit_standardizer(samples: &[VoxelSample]) -> (Vec<f64>, Vec<f64>) {
    let c = INPUT_WIDTH;
    let n: usize = samples.iter().map(|s| s.tensor.len()).sum::<usize>().max(1);
    let mut mean = vec![0.0; c];
    for s in samples {
        for r in s.tensor.features().iter_rows() {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for s in samples {
        for r in s.tensor.features().iter_rows() {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std = var.iter().map(|v| (v / n as f64).sqrt()).map(|s| if s < 1e-9 { 1.0 } else { s }).collect();
    (mean, std)
}

fn standardize(s: &VoxelSample, mean: &[f64], std: &[f64]) -> Result<VoxelSample, NetError> {
    let mut f = s.tensor.features().clone();
    for r in 0..f.rows() {
        for ((v, m), sd) in f.row_mut(r).iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / sd;
        }
    }
    Ok(VoxelSample {
        tensor: s.tensor.with_features(f)?,
        h2d: s.h2d.clone(),
        labels: s.labels.clone(),
        mask: s.mask.clone(),
    })
}

/// Trains on `train` and scores `eval`. Deterministic given the inputs and
/// the generator state.
pub fn toy_noise_classifier_train(
    train: &[VoxelSample],
    eval: &[VoxelSample],
    cfg: &ClassifierConfig,
    rng: &mut SeededRng,
) -> Result<ClassifierMetrics, NetError> {
    if cfg.hidden == 0 || cfg.hidden % 2 != 0 {
        return Err(NetError::Spec(format!("hidden width {} must be positive and even", cfg.hidden)));
    }
    if !(cfg.lr > 0.0) {
        return Err(NetError::Spec(format!("learning rate {} must be positive", cfg.lr)));
    }
    let (mean, std) = fit_standardizer(train);
    let mut train: Vec<VoxelSample> = train.iter().map(|s| standardize(s, &mean, &std)).collect::<Result<_, _>>()?;
    let eval: Vec<VoxelSample> = eval.iter().map(|s| standardize(s, &mean, &std)).collect::<Result<_, _>>()?;

    if cfg.shuffle_labels {
        let masked = |s: &VoxelSample| s.labels.iter().zip(&s.mask).filter(|(_, &m)| m).map(|(&l, _)| l).collect::<Vec<_>>();
        let mut all: Vec<bool> = train.iter().flat_map(masked).collect();
        rng.fork(7).shuffle(&mut all);
        let mut it = all.into_iter();
        for s in &mut train {
            for (l, &m) in s.labels.iter_mut().zip(&s.mask) {
                if m {
                    *l = it.next().expect("same count");
                }
            }
        }
    }

    let pos: usize = train.iter().map(VoxelSample::positives).sum();
    let total: usize = train.iter().map(VoxelSample::candidates).sum();
    let neg = total - pos;
    let (w_pos, w_neg) = (0.5 / pos.max(1) as f64, 0.5 / neg.max(1) as f64);

    let mut model = Model::new(cfg, &mut rng.fork(1))?;
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        for k in model.kernels() {
            k.zero_grad();
        }
        let mut grad_w = vec![0.0; cfg.hidden];
        let mut grad_b = 0.0;
        let mut loss = 0.0;
        for s in &train {
            let h = model.hidden(s)?;
            let scores = model.scores(&h);
            let mut g_hidden = FeatureMatrix::zeros(h.rows(), h.cols());
            for (i, (&score, &y)) in scores.iter().zip(&s.labels).enumerate() {
                if !s.mask[i] {
                    continue;
                }
                let (w, sign) = if y { (w_pos, 1.0) } else { (w_neg, -1.0) };
                loss += w * softplus(-sign * score);
                let ds = w * (sigmoid(score) - if y { 1.0 } else { 0.0 });
                grad_b += ds;
                for (gw, hv) in grad_w.iter_mut().zip(h.row(i)) {
                    *gw += ds * hv;
                }
                for (gh, wv) in g_hidden.row_mut(i).iter_mut().zip(&model.head_w) {
                    *gh = ds * wv;
                }
            }
            model.backward(&g_hidden)?;
        }
        if !loss.is_finite() {
            return Err(NetError::Divergence { epoch });
        }
        final_loss = loss;
        for k in model.kernels() {
            k.sgd_step(cfg.lr);
        }
        for (w, g) in model.head_w.iter_mut().zip(&grad_w) {
            *w -= cfg.lr * g;
        }
        model.head_b -= cfg.lr * grad_b;
    }

    let score_all = |model: &mut Model, set: &[VoxelSample]| -> Result<(Vec<f64>, Vec<bool>), NetError> {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for s in set {
            let h = model.hidden(s)?;
            for ((score, &l), &m) in model.scores(&h).into_iter().zip(&s.labels).zip(&s.mask) {
                if m {
                    scores.push(score);
                    labels.push(l);
                }
            }
        }
        Ok((scores, labels))
    };
    let (ts, tl) = score_all(&mut model, &train)?;
    let (es, el) = score_all(&mut model, &eval)?;
    Ok(ClassifierMetrics {
        head: cfg.head,
        shuffled: cfg.shuffle_labels,
        epochs: cfg.epochs,
        final_loss,
        train_auc: roc_auc(&ts, &tl),
        eval_auc: roc_auc(&es, &el),
        eval_voxels: el.len(),
        eval_positives: el.iter().filter(|&&l| l).count(),
    })
}
