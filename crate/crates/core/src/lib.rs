//! Desk-scale neural-field latent diffusion: a procedural multi-camera world,
//! a voxel scene autoencoder, a hierarchical latent autoencoder, latent
//! diffusion with guidance and editing, score-distillation refinement and mesh
//! export.

pub mod camera;
pub mod diffusion;
pub mod geometry;
pub mod guidance;
pub mod io;
pub mod lae;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod rng;
pub mod scene_ae;
pub mod scene_encoder;
pub mod synthworld;

use std::path::PathBuf;

pub use nfldm_tensor as tensor;

#[derive(Debug, thiserror::Error)]
pub enum NfError {
    #[error(transparent)]
    Tensor(#[from] nfldm_tensor::TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error in {section}.{field}: {msg}")]
    Config { section: String, field: String, msg: String },
    #[error("missing artifact {path} (needed by stage {stage})")]
    MissingArtifact { stage: String, path: PathBuf },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T, E = NfError> = std::result::Result<T, E>;
