//! Sparse voxel convolution for fused LiDAR and virtual-point clouds.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: sparse voxel tensors with hashed coordinate lookup.
//! * [`geometry`]: point clouds, voxelization, augmentation and the
//!   voxel-to-image projection chain, KITTI file formats.
//! * [`stvd`]: bin-based input voxel discard, training-time layer discard and
//!   sampling baselines.
//! * [`conv`]: submanifold 3D convolution, the image-plane 2D branch, the
//!   noise-resistant concatenation of both, strided downsampling, and their
//!   backward passes.
//! * [`net`]: the four-level backbone, early fusion, the synthetic scene
//!   generator and a small noise classifier used as a testbed.
//! * [`bench`]: timing harness for the discard-rate sweep.

pub mod rng;
pub mod tensor;
pub mod geometry;
pub mod stvd;
pub mod conv;
pub mod net;
pub mod bench;

pub use rng::SeededRng;
pub use tensor::{FeatureMatrix, SparseVoxelTensor, TensorError, VoxelGridSpec, VoxelIndex, VoxelOrigin};

/// Short stable digest of a serializable configuration, embedded in outputs
/// so fixtures identify the settings that produced them.
pub fn config_hash<T: serde::Serialize + ?Sized>(config: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(config).expect("configuration serializes");
    Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
}
