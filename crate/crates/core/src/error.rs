use thiserror::Error;

use crate::autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("deformation exceeds physical cap: max |dz| = {max_dz} mm > {cap} mm")]
    DeformationCap { max_dz: f64, cap: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("dataset generation failed at design {index}: {source}")]
    Dataset {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("least-squares fit failed: {0}")]
    Fit(String),

    #[error("negative radicand at point {index}: the point lies outside the fitted sphere footprint")]
    OutsideFootprint { index: usize },

    #[error("total internal reflection (radicand {radicand:.3e})")]
    TotalInternalReflection { radicand: f64 },

    #[error("too many rays flagged: {flagged} of {total}")]
    TraceBudget { flagged: usize, total: usize },

    #[error("no interior minimum in focus search interval [{lo}, {hi}]")]
    NoInteriorMinimum { lo: f64, hi: f64, profile: Vec<(f64, f64)> },

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
