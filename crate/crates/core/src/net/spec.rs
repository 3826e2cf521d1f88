use serde::{Deserialize, Serialize};

use super::NetError;
use crate::conv::{Activation, ConvKernel, NrConvWeights};
use crate::geometry::POINT_FEATURES;
use crate::rng::SeededRng;
use crate::tensor::{VoxelGridSpec, KERNEL_VOLUME_3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirConvBlockSpec {
    pub num_nrconv_layers: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub layer_stvd_rate: f64,
    /// Halve the resolution with a strided convolution after the NRConv layers.
    pub downsample: bool,
}

impl VirConvBlockSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.num_nrconv_layers == 0 {
            return Err(NetError::Spec("a block needs at least one NRConv layer".into()));
        }
        if self.c_in == 0 || self.c_out == 0 || self.c_out % 2 != 0 {
            return Err(NetError::Spec(format!(
                "block widths {} -> {} must be positive with an even output",
                self.c_in, self.c_out
            )));
        }
        if !(0.0..1.0).contains(&self.layer_stvd_rate) {
            return Err(NetError::Spec(format!("layer discard rate {} outside [0, 1)", self.layer_stvd_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirConvNetSpec {
    pub grid: VoxelGridSpec,
    pub blocks: Vec<VirConvBlockSpec>,
    pub activation: Activation,
    /// Pixel-cell edge for the image-plane branch; `None` uses the block's
    /// stride level.
    pub pixel_cell: Option<u32>,
}

impl Default for VirConvNetSpec {
    fn default() -> Self {
        let widths = [16, 32, 64, 64];
        let mut c_in = POINT_FEATURES;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let b = VirConvBlockSpec {
                    num_nrconv_layers: 2,
                    c_in,
                    c_out,
                    layer_stvd_rate: 0.15,
                    downsample: i > 0,
                };
                c_in = c_out;
                b
            })
            .collect();
        Self {
            grid: VoxelGridSpec::kitti_default(),
            blocks,
            activation: Activation::Relu,
            pixel_cell: None,
        }
    }
}

impl VirConvNetSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        self.grid.validate()?;
        self.activation.validate()?;
        if self.blocks.is_empty() {
            return Err(NetError::Spec("network has no blocks".into()));
        }
        if self.blocks[0].c_in != POINT_FEATURES {
            return Err(NetError::Spec(format!(
                "first block must take {POINT_FEATURES} input channels, got {}",
                self.blocks[0].c_in
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if i > 0 && b.c_in != self.blocks[i - 1].c_out {
                return Err(NetError::Spec(format!(
                    "block {} takes {} channels but block {} emits {}",
                    i + 1,
                    b.c_in,
                    i,
                    self.blocks[i - 1].c_out
                )));
            }
        }
        if self.pixel_cell == Some(0) {
            return Err(NetError::Spec("pixel cell must be positive".into()));
        }
        Ok(())
    }

    /// Stride level of each block's output.
    pub fn output_strides(&self) -> Vec<u32> {
        let mut s = self.grid.stride_level;
        self.blocks
            .iter()
            .map(|b| {
                if b.downsample {
                    s *= 2;
                }
                s
            })
            .collect()
    }

    pub fn output_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.c_out).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub nrconv: Vec<NrConvWeights>,
    pub downsample: Option<ConvKernel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetWeights {
    pub blocks: Vec<BlockWeights>,
}

impl NetWeights {
    /// Glorot-uniform weights, zero biases.
    pub fn glorot(spec: &VirConvNetSpec, rng: &mut SeededRng) -> Result<Self, NetError> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for b in &spec.blocks {
            let mut nrconv = Vec::with_capacity(b.num_nrconv_layers);
            for l in 0..b.num_nrconv_layers {
                let c_in = if l == 0 { b.c_in } else { b.c_out };
                nrconv.push(NrConvWeights::glorot(c_in, b.c_out, rng)?);
            }
            let downsample = b
                .downsample
                .then(|| ConvKernel::glorot(KERNEL_VOLUME_3D, b.c_out, b.c_out, rng));
            blocks.push(BlockWeights { nrconv, downsample });
        }
        Ok(Self { blocks })
    }

    /// Checks that every kernel has the shape the spec asks for.
    pub fn validate(&self, spec: &VirConvNetSpec) -> Result<(), NetError> {
        if self.blocks.len() != spec.blocks.len() {
            return Err(NetError::Spec(format!(
                "weights have {} blocks, network has {}",
                self.blocks.len(),
                spec.blocks.len()
            )));
        }
        for (i, (w, b)) in self.blocks.iter().zip(&spec.blocks).enumerate() {
            if w.nrconv.len() != b.num_nrconv_layers {
                return Err(NetError::Spec(format!(
                    "block {} has {} NRConv layers in the weights, {} in the spec",
                    i + 1,
                    w.nrconv.len(),
                    b.num_nrconv_layers
                )));
            }
            for (l, nr) in w.nrconv.iter().enumerate() {
                nr.validate()?;
                let c_in = if l == 0 { b.c_in } else { b.c_out };
                if nr.c_in() != c_in || nr.c_out() != b.c_out {
                    return Err(NetError::Spec(format!(
                        "block {} layer {} maps {} -> {}, spec wants {} -> {}",
                        i + 1,
                        l + 1,
                        nr.c_in(),
                        nr.c_out(),
                        c_in,
                        b.c_out
                    )));
                }
            }
            match (&w.downsample, b.downsample) {
                (Some(k), true) if k.offsets() == KERNEL_VOLUME_3D && k.c_in() == b.c_out && k.c_out() == b.c_out => {}
                (None, false) => {}
                _ => {
                    return Err(NetError::Spec(format!(
                        "block {} downsample kernel does not match the spec",
                        i + 1
                    )))
                }
            }
        }
        Ok(())
    }

    /// Every kernel with a stable dotted name, in checkpoint order.
    pub fn named_kernels(&self) -> Vec<(String, &ConvKernel)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (l, nr) in b.nrconv.iter().enumerate() {
                out.push((format!("block{}.nrconv{}.k3d", i + 1, l + 1), &nr.k3d));
                out.push((format!("block{}.nrconv{}.k2d", i + 1, l + 1), &nr.k2d));
            }
            if let Some(k) = &b.downsample {
                out.push((format!("block{}.downsample", i + 1), k));
            }
        }
        out
    }

    pub fn named_kernels_mut(&mut self) -> Vec<&mut ConvKernel> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for nr in &mut b.nrconv {
                out.push(&mut nr.k3d);
                out.push(&mut nr.k2d);
            }
            if let Some(k) = &mut b.downsample {
                out.push(k);
            }
        }
        out
    }
}
