use std::time::Instant;

use serde::Serialize;

use super::{BlockWeights, NetError, NetWeights, VirConvBlockSpec, VirConvNetSpec};
use crate::conv::{nrconv, spconv_downsample, Activation};
use crate::geometry::{project_voxels, voxelize, AugmentationRecord, Calibration, PixelCell, SparsePointCloud};
use crate::rng::SeededRng;
use crate::stvd::{input_stvd, layer_stvd_with_mode, StvdConfig};
use crate::tensor::SparseVoxelTensor;

/// Wall time of one forward stage, milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub ms: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Voxels produced by voxelization.
    pub input_voxels: usize,
    /// Voxels entering block 1.
    pub after_input_stvd: usize,
    /// One tensor per block.
    pub levels: Vec<SparseVoxelTensor>,
    pub timings: Vec<StageTiming>,
    /// No voxel survived cropping and discard; levels are empty tensors of
    /// the right shape.
    pub empty_scene: bool,
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: impl Into<String>, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.push(StageTiming {
        stage: stage.into(),
        ms: start.elapsed().as_secs_f64() * 1e3,
    });
    out
}

/// One VirConv block: layer discard (training only), NRConv layers sharing a
/// single projection of the post-discard sites, then optional downsampling.
#[allow(clippy::too_many_arguments)]
pub fn virconv_block(
    tensor: &SparseVoxelTensor,
    project: &dyn Fn(&SparseVoxelTensor) -> Vec<Option<PixelCell>>,
    spec: &VirConvBlockSpec,
    weights: &BlockWeights,
    act: Activation,
    cfg: &StvdConfig,
    rng: &mut SeededRng,
    training: bool,
) -> Result<SparseVoxelTensor, NetError> {
    let mode = cfg.resolve_mode(tensor);
    let mut x = layer_stvd_with_mode(tensor, spec.layer_stvd_rate, mode, rng, training)?;
    let h2d = project(&x);
    for w in &weights.nrconv {
        x = nrconv(&x, &h2d, w, act)?;
    }
    if let Some(k) = &weights.downsample {
        x = spconv_downsample(&x, k, act)?;
    }
    Ok(x)
}

/// Backbone forward from a point cloud: voxelize, optional input discard,
/// then every block. `stvd: None` disables input discard.
#[allow(clippy::too_many_arguments)]
pub fn virconvnet_forward(
    cloud: &SparsePointCloud,
    net: &VirConvNetSpec,
    stvd: Option<&StvdConfig>,
    calib: &Calibration,
    record: &AugmentationRecord,
    weights: &NetWeights,
    rng: &mut SeededRng,
    training: bool,
) -> Result<ForwardOutput, NetError> {
    let mut timings = Vec::new();
    let tensor = timed(&mut timings, "voxelize", || voxelize(cloud, &net.grid))?;
    let mut out = virconvnet_forward_tensor(&tensor, net, stvd, calib, record, weights, rng, training)?;
    timings.append(&mut out.timings);
    out.timings = timings;
    Ok(out)
}

/// Backbone forward from an already voxelized level-0 tensor.
#[allow(clippy::too_many_arguments)]
pub fn virconvnet_forward_tensor(
    tensor: &SparseVoxelTensor,
    net: &VirConvNetSpec,
    stvd: Option<&StvdConfig>,
    calib: &Calibration,
    record: &AugmentationRecord,
    weights: &NetWeights,
    rng: &mut SeededRng,
    training: bool,
) -> Result<ForwardOutput, NetError> {
    net.validate()?;
    weights.validate(net)?;
    if tensor.width() != net.blocks[0].c_in {
        return Err(NetError::Spec(format!(
            "input tensor has width {}, first block expects {}",
            tensor.width(),
            net.blocks[0].c_in
        )));
    }
    let mut timings = Vec::new();
    let layer_cfg = stvd.cloned().unwrap_or_default();
    layer_cfg.validate()?;

    let mut x = match stvd {
        Some(cfg) => {
            let mut r = rng.fork(0);
            timed(&mut timings, "input_stvd", || input_stvd(tensor, cfg, &mut r))?
        }
        None => tensor.clone(),
    };
    let after_input_stvd = x.len();

    let mut levels = Vec::with_capacity(net.blocks.len());
    for (i, (spec, w)) in net.blocks.iter().zip(&weights.blocks).enumerate() {
        let mut r = rng.fork(1 + i as u64);
        let project = |t: &SparseVoxelTensor| {
            let cell = net.pixel_cell.unwrap_or(t.spec().stride_level);
            project_voxels(t, record, calib, cell)
        };
        x = timed(&mut timings, format!("block{}", i + 1), || {
            virconv_block(&x, &project, spec, w, net.activation, &layer_cfg, &mut r, training)
        })?;
        levels.push(x.clone());
    }
    Ok(ForwardOutput {
        input_voxels: tensor.len(),
        after_input_stvd,
        empty_scene: after_input_stvd == 0,
        levels,
        timings,
    })
}
