//! The VirConv block, the four-level backbone, early fusion, checkpoints, the
//! synthetic scene generator and the toy noise classifier.

mod backbone;
pub mod checkpoint;
pub mod classifier;
mod fusion;
pub mod scene;
mod spec;

use std::path::PathBuf;

use thiserror::Error;

use crate::conv::ConvError;
use crate::geometry::GeometryError;
use crate::stvd::StvdError;
use crate::tensor::TensorError;

pub use backbone::{virconv_block, virconvnet_forward, virconvnet_forward_tensor, ForwardOutput, StageTiming};
pub use fusion::{fuse_early, split_by_origin};
pub use spec::{BlockWeights, NetWeights, VirConvBlockSpec, VirConvNetSpec};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("{cloud} cloud has a point with the wrong origin flag at index {index}")]
    MixedSources { cloud: &'static str, index: usize },
    #[error("placed only {placed} of {requested} objects without overlap")]
    Placement { placed: usize, requested: usize },
    #[error("training diverged at epoch {epoch} (loss is not finite); try a lower learning rate")]
    Divergence { epoch: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Conv(#[from] ConvError),
    #[error(transparent)]
    Stvd(#[from] StvdError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl NetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Whether the failure comes from unreadable or malformed input files, as
    /// opposed to a shape or configuration problem.
    pub fn is_parse_error(&self) -> bool {
        match self {
            Self::Io { .. } | Self::Format { .. } => true,
            Self::Geometry(g) => g.is_parse_error(),
            _ => false,
        }
    }
}
