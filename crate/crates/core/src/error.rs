use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PanoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PanoError {
    #[error("equirectangular aspect violated: width {width} must equal 2 x height {height}")]
    Aspect { width: usize, height: usize },

    #[error("shape mismatch in {what}: {detail}")]
    Shape { what: &'static str, detail: String },

    #[error("field of view {0} deg outside (0, 170)")]
    Fov(f64),

    #[error("circular pad {pad} exceeds width {width}")]
    PadTooLarge { pad: usize, width: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid room: {0}")]
    Room(String),

    #[error("no mask within area bounds after {attempts} attempts: {bound} bound violated")]
    MaskArea { bound: &'static str, attempts: usize },

    #[error("empty region: {0}")]
    EmptyRegion(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("scene {scene}: {reason}")]
    Scene { scene: String, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PanoError {
    pub(crate) fn shape(what: &'static str, detail: impl Into<String>) -> Self {
        PanoError::Shape { what, detail: detail.into() }
    }
}
