use nalgebra::Vector3;

use crate::error::{Error, Result};

/// One stereo sighting of a landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackObservation {
    pub pose_index: usize,
    pub x: f64,
    pub y: f64,
    pub u_right: f64,
}

/// A physical landmark followed through time by the front end.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkTrack {
    pub landmark_id: u64,
    pub observations: Vec<TrackObservation>,
    /// Number of distinct poses that observed the landmark.
    pub n_poses_seen: usize,
    /// Current world-frame estimate.
    pub current_estimate: Vector3<f64>,
    /// Optimized position from the latest batch solve, if any.
    pub last_optimized: Option<Vector3<f64>>,
}

impl LandmarkTrack {
    pub fn new(landmark_id: u64, obs: TrackObservation, world: Vector3<f64>) -> Self {
        Self {
            landmark_id,
            observations: vec![obs],
            n_poses_seen: 1,
            current_estimate: world,
            last_optimized: None,
        }
    }

    pub fn in_graph(&self) -> bool {
        self.n_poses_seen >= 2
    }
}

/// Initial guess for a landmark that has just been seen again.
///
/// With one earlier sighting the two world-frame points are averaged. With
/// `N > 1` earlier sightings the optimized position is weighted by `N`
/// against the new point.
pub fn update_landmark_estimate(track: &LandmarkTrack, new_obs_world: &Vector3<f64>) -> Result<Vector3<f64>> {
    if !new_obs_world.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation(format!(
            "landmark {}: non-finite observation",
            track.landmark_id
        )));
    }
    match track.n_poses_seen {
        0 => Err(Error::Sequencing {
            landmark_id: track.landmark_id,
            message: "no prior observation".into(),
        }),
        1 => Ok((track.current_estimate + new_obs_world) / 2.0),
        n => {
            let optimized = track.last_optimized.ok_or_else(|| Error::Sequencing {
                landmark_id: track.landmark_id,
                message: format!("seen from {n} poses but never optimized"),
            })?;
            let n = n as f64;
            Ok((optimized * n + new_obs_world) / (n + 1.0))
        }
    }
}
