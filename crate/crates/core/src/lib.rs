//! Semantic occupancy from pixel-aligned 3D Gaussians.
//!
//! The pipeline unprojects per-view depth into Gaussians, prunes them to one
//! representative per voxel, applies bounded positional offsets and renders
//! a dense semantic occupancy grid by probabilistic superposition.

pub mod attention;
pub mod cli;
pub mod edt;
pub mod error;
pub mod init;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod render;
pub mod sampler;
pub mod synth;
pub mod traversal;

pub use error::{Error, Result};
pub use model::{
    covariance_of, CameraModel, DepthMap, GaussianPrimitive, GaussianSet, GridGeometry, OccupancyGrid, Provenance,
    Quat, VoxelGridSpec,
};
