use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate disparity {disparity} px (must be positive)")]
    DegenerateDisparity { disparity: f64 },

    #[error("unreliable depth: disparity {disparity} px below floor {floor} px")]
    UnreliableDepth { disparity: f64, floor: f64 },

    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("tracking failure: {0}")]
    Tracking(#[from] TrackingFailure),

    #[error("landmark {landmark_id}: {message}")]
    Sequencing { landmark_id: u64, message: String },

    #[error("under-constrained variable {variable}: normal equations not positive definite")]
    Singular { variable: Variable },

    #[error("optimizer diverged after {iterations} iterations (non-finite cost)")]
    Divergence { iterations: usize },
}

/// A variable of the factor graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    /// Pose index within the graph.
    Pose(usize),
    /// Landmark id.
    Landmark(u64),
}

impl std::fmt::Display for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variable::Pose(k) => write!(f, "pose {k}"),
            Variable::Landmark(id) => write!(f, "landmark {id}"),
        }
    }
}

/// Reasons the front end stops tracking.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackingFailure {
    #[error("only {found} correspondences, need at least {required}")]
    TooFewMatches { found: usize, required: usize },

    #[error("translation {magnitude:.4} m exceeds bound {bound:.4} m")]
    TranslationBound { magnitude: f64, bound: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
