//! Unified sparse-voxel 3D backbone with window-partitioned linear-RNN group
//! scans over LiDAR, camera, and temporal voxel tokens, plus voxel generation,
//! token-level fusion, a minimal reverse-mode tape for gradient checks and toy
//! training, and dynamic multi-task loss balancing.

pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod loss;
pub mod mat;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod rng;
pub mod scan;
pub mod scene;
pub mod sparse;
pub mod voxel;

pub use error::{Error, Result};
