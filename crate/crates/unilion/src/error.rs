use thiserror::Error;

use crate::voxel::VoxelCoord;

/// Errors surfaced by the library's fallible contracts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate coordinate {0:?}; merge before canonicalizing")]
    DuplicateCoordinate(VoxelCoord),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("voxel grids differ between operands")]
    GridMismatch,

    #[error("group layout covers {layout} rows but the set has {set}")]
    LayoutMismatch { layout: usize, set: usize },

    #[error("index map does not match the coarse set: {0}")]
    IndexMapMismatch(&'static str),

    #[error("camera intrinsics are singular (|det| = {det:e})")]
    SingularIntrinsics { det: f64 },

    #[error("pose rotation is not orthonormal (deviation {deviation:e})")]
    NonRigidPose { deviation: f64 },

    #[error("loss node is not a scalar ({rows}x{cols})")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("detection loss is missing but a dynamically weighted task is present")]
    MissingDetectionLoss,

    #[error("modality '{0}' is enabled but its input is missing")]
    MissingModality(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
