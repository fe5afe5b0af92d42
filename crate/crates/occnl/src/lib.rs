//! A desk-scale laboratory for label noise in 3D semantic occupancy grids.
//!
//! The crate synthesizes voxel scenes, corrupts their labels with
//! occupancy-asymmetric flips or dynamic-object trailing artifacts, trains a
//! dual-source partial-label learner against the noise, and evaluates
//! geometric and semantic IoU against refined ground truth. Everything is
//! deterministic given a seed, CPU-only, and sized to run in seconds.

pub mod candidate;
pub mod config;
pub mod learner;
pub mod loss;
pub mod metrics;
pub mod noise;
pub mod ocv1;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod voxel;

pub use voxel::{ClassId, Dims, LabelSpace, VoxelGrid, VoxelMask};
