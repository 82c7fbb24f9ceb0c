use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: quaternion has zero norm")]
    DegenerateRotation,
    #[error("degenerate scale: every scale component must be positive, got {0:?}")]
    DegenerateScale([f64; 3]),
    #[error("degenerate direction: ray direction has zero length")]
    DegenerateDirection,
    #[error("direction is behind the image plane")]
    BehindImagePlane,
    #[error("unsupported spherical harmonics degree {0} (supported: 0..=3)")]
    UnsupportedShDegree(usize),
    #[error("view-space covariance is not symmetric positive definite")]
    NotSpd,
    #[error("pixel ({x}, {y}) outside a {w}x{h} image")]
    PixelOutOfRange { x: usize, y: usize, w: usize, h: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("quadrature did not converge (estimated residual {residual:e})")]
    Quadrature { residual: f64 },
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
