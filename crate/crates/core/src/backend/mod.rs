//! Robust factor-graph back end: stereo projection factors between poses
//! and landmarks, motion priors between consecutive poses, and a batch
//! Dogleg (or Levenberg-Marquardt) solver.

mod export;
mod factors;
mod graph;
mod optimizer;
mod robust;
mod track;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use export::{read_landmark_csv, read_trajectory_csv, write_landmark_csv, write_trajectory_csv, LandmarkRow};
pub use factors::{
    motion_linearize, motion_residual, motion_sqrt_information, stereo_linearize, stereo_residual,
    MotionLinearization, StereoLinearization, StereoMeasurement,
};
pub use graph::{FactorGraphProblem, MotionFactor, StereoFactor, StereoObservation};
pub use optimizer::{optimize, OptimizeResult};
pub use robust::{huber_rho, huber_weight};
pub use track::{update_landmark_estimate, LandmarkTrack, TrackObservation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Dogleg,
    LevenbergMarquardt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    /// Huber threshold on the whitened residual norm.
    pub huber_k: f64,
    pub pixel_sigma: f64,
    pub motion_sigma_rot: f64,
    pub motion_sigma_along: f64,
    pub motion_sigma_perp: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub convergence_tol: f64,
    pub optimizer: OptimizerKind,
    /// Stereo factors whose whitened residual norm exceeds this after a
    /// solve are removed by the pipeline and the solve repeated. `None`
    /// keeps every factor.
    #[serde(default)]
    pub outlier_threshold: Option<f64>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            huber_k: 3.0,
            pixel_sigma: 1.0,
            motion_sigma_rot: 0.01,
            motion_sigma_along: 0.2,
            motion_sigma_perp: 0.01,
            max_iterations: 50,
            convergence_tol: 1e-10,
            optimizer: OptimizerKind::Dogleg,
            outlier_threshold: Some(4.0),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.pixel_sigma,
            self.motion_sigma_rot,
            self.motion_sigma_along,
            self.motion_sigma_perp,
        ];
        if !sigmas.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Validation("backend sigmas must be positive and finite".into()));
        }
        // huber_k may be infinite (plain least squares).
        if !(self.huber_k > 0.0) {
            return Err(Error::Validation("huber_k must be positive".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Validation("convergence_tol must be non-negative".into()));
        }
        if self.outlier_threshold.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Validation("outlier_threshold must be positive".into()));
        }
        if self.motion_sigma_along < self.motion_sigma_perp {
            log::warn!(
                "motion_sigma_along ({}) below motion_sigma_perp ({})",
                self.motion_sigma_along,
                self.motion_sigma_perp
            );
        }
        Ok(())
    }
}
