//! Sparse-voxel sequence modeling for LiDAR backbones.
//!
//! Voxels are serialized with complementary Z-order curves, encoded by
//! selective state-space scans over global and windowed sequences, and
//! stitched into an encoder-decoder with sparse convolutions.

pub mod backbone;
pub mod bench;
pub mod block;
pub mod check;
pub mod container;
pub mod curves;
pub mod error;
pub mod oracle;
pub mod persist;
pub mod sparseconv;
pub mod ssm;
pub mod tensor;
pub mod voxelgrid;

pub use backbone::{backbone_forward, BackboneConfig, BackboneOutput, BackboneParams};
pub use block::{unimamba_block_forward, BlockConfig, BlockParams};
pub use curves::{make_order, Curve, Priority, SerializationOrder, WindowPartition};
pub use error::{Error, Result};
pub use sparseconv::{ConvMode, SparseConvWeights};
pub use tensor::Matrix;
pub use voxelgrid::{voxelize, BevMap, PointCloud, SparseVoxelTensor, VoxelizationConfig};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "UNIMAMBA_THREADS";

/// Sizes the global rayon pool from [`THREADS_ENV`] when set. Call once, early.
pub fn init_threads_from_env() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::config(THREADS_ENV, format!("expected a thread count, got `{raw}`")))?;
    // a pool that already exists is kept as is
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}
