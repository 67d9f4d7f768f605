//! Object-level stereo SLAM for row-structured crop scenes.
//!
//! Detected object centers (seeds) are associated across stereo pairs and
//! consecutive frames by their relative neighbor geometry, camera motion is
//! estimated with a translation-only alignment, and poses plus landmarks are
//! refined in a robust factor graph. A synthetic field simulator and the
//! evaluation metrics close the loop.

pub mod assoc;
pub mod backend;
pub mod config;
pub mod detections;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod lie;
pub mod pipeline;
pub mod postprocess;
pub mod sim;
pub mod types;

pub use error::{Error, Result, TrackingFailure, Variable};
pub use types::{
    compose, CameraRig, CoordFrame, DetectionFrame, Keypoint2D, PointCloud3D, PoseSE3, StereoMatch,
    TrajectoryEstimate,
};
pub use config::PipelineConfig;
pub use eval::{FailureReason, RunReport};
pub use pipeline::{run_slam, PipelineOptions, PipelineOutput};
