use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::Vector3;

use super::factors::{stereo_residual, StereoMeasurement};
use super::track::{update_landmark_estimate, LandmarkTrack, TrackObservation};
use crate::error::{Error, Result};
use crate::geometry;
use crate::types::{CameraRig, Keypoint2D, PoseSE3, StereoMatch};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoFactor {
    pub pose: usize,
    /// Index into [`FactorGraphProblem::landmarks`].
    pub landmark: usize,
    pub measured: StereoMeasurement,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionFactor {
    pub from: usize,
    pub to: usize,
    pub measured: PoseSE3,
}

/// One stereo observation handed to [`FactorGraphProblem::add_frame`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoObservation {
    pub landmark_id: u64,
    pub x: f64,
    pub u_right: f64,
    pub y: f64,
}

/// Poses, landmarks and the factors linking them, plus the per-landmark
/// tracks that decide when a landmark enters the graph.
///
/// Pose 0 carries the gauge prior and is held fixed by the optimizer.
#[derive(Debug, Clone)]
pub struct FactorGraphProblem {
    pub rig: CameraRig,
    /// Motion axis used to shape the motion-prior noise.
    pub motion_direction: Vector3<f64>,
    pub poses: Vec<PoseSE3>,
    pub landmarks: Vec<Vector3<f64>>,
    pub landmark_ids: Vec<u64>,
    pub stereo_factors: Vec<StereoFactor>,
    pub motion_factors: Vec<MotionFactor>,
    pub gauge_prior: Option<PoseSE3>,
    landmark_index: HashMap<u64, usize>,
    factor_keys: HashSet<(usize, usize)>,
    tracks: BTreeMap<u64, LandmarkTrack>,
    rejected: HashSet<u64>,
}

impl FactorGraphProblem {
    pub fn new(rig: CameraRig, motion_direction: Vector3<f64>) -> Self {
        Self {
            rig,
            motion_direction,
            poses: Vec::new(),
            landmarks: Vec::new(),
            landmark_ids: Vec::new(),
            stereo_factors: Vec::new(),
            motion_factors: Vec::new(),
            gauge_prior: None,
            landmark_index: HashMap::new(),
            factor_keys: HashSet::new(),
            tracks: BTreeMap::new(),
            rejected: HashSet::new(),
        }
    }

    pub fn tracks(&self) -> &BTreeMap<u64, LandmarkTrack> {
        &self.tracks
    }

    pub fn landmark_slot(&self, id: u64) -> Option<usize> {
        self.landmark_index.get(&id).copied()
    }

    pub fn landmark(&self, id: u64) -> Option<Vector3<f64>> {
        self.landmark_slot(id).map(|k| self.landmarks[k])
    }

    // Low-level builders. `add_frame` is the normal entry point; these exist
    // for problems assembled directly (tests, benchmarks, replays).

    /// Adds a pose variable; the first one also receives the gauge prior.
    pub fn add_pose(&mut self, pose: PoseSE3) -> usize {
        if self.poses.is_empty() {
            self.gauge_prior = Some(pose);
        }
        self.poses.push(pose);
        self.poses.len() - 1
    }

    pub fn add_landmark(&mut self, id: u64, position: Vector3<f64>) -> Result<usize> {
        if self.landmark_index.contains_key(&id) {
            return Err(Error::Validation(format!("landmark {id} already in graph")));
        }
        self.landmarks.push(position);
        self.landmark_ids.push(id);
        let slot = self.landmarks.len() - 1;
        self.landmark_index.insert(id, slot);
        Ok(slot)
    }

    pub fn add_stereo_factor(&mut self, pose: usize, landmark_id: u64, measured: StereoMeasurement) -> Result<()> {
        let landmark = self
            .landmark_slot(landmark_id)
            .ok_or_else(|| Error::Validation(format!("unknown landmark {landmark_id}")))?;
        if pose >= self.poses.len() {
            return Err(Error::Validation(format!("unknown pose {pose}")));
        }
        if !self.factor_keys.insert((pose, landmark)) {
            return Err(Error::Validation(format!(
                "duplicate stereo factor for pose {pose}, landmark {landmark_id}"
            )));
        }
        self.stereo_factors.push(StereoFactor {
            pose,
            landmark,
            measured,
        });
        Ok(())
    }

    pub fn add_motion_factor(&mut self, from: usize, to: usize, measured: PoseSE3) -> Result<()> {
        if from >= self.poses.len() || to >= self.poses.len() || from == to {
            return Err(Error::Validation(format!("bad motion factor {from} -> {to}")));
        }
        self.motion_factors.push(MotionFactor { from, to, measured });
        Ok(())
    }

    /// Appends a frame: a new pose, the motion factor from the previous pose,
    /// and stereo factors for every observed landmark seen from at least two
    /// poses. Landmarks reaching two sightings are initialized here.
    pub fn add_frame(
        &mut self,
        pose_estimate: PoseSE3,
        relative_pose: PoseSE3,
        stereo_obs: &[StereoObservation],
    ) -> Result<usize> {
        let mut seen = HashSet::new();
        for o in stereo_obs {
            if !seen.insert(o.landmark_id) {
                return Err(Error::Validation(format!(
                    "duplicate observation of landmark {} in one frame",
                    o.landmark_id
                )));
            }
        }
        let stereo_obs: Vec<StereoObservation> = stereo_obs
            .iter()
            .filter(|o| !self.rejected.contains(&o.landmark_id))
            .copied()
            .collect();
        let cam_points = stereo_obs
            .iter()
            .map(|o| self.camera_point(o))
            .collect::<Result<Vec<_>>>()?;
        // Sequencing is checked before anything is mutated.
        for o in &stereo_obs {
            if let Some(t) = self.tracks.get(&o.landmark_id) {
                if t.n_poses_seen > 1 && t.last_optimized.is_none() {
                    return Err(Error::Sequencing {
                        landmark_id: o.landmark_id,
                        message: format!("seen from {} poses but never optimized", t.n_poses_seen),
                    });
                }
            }
        }

        let pose_index = self.add_pose(pose_estimate);
        if pose_index > 0 {
            self.add_motion_factor(pose_index - 1, pose_index, relative_pose)?;
        }

        for (o, pc) in stereo_obs.iter().zip(cam_points) {
            let world = pose_estimate.transform_point(&pc);
            let obs = TrackObservation {
                pose_index,
                x: o.x,
                y: o.y,
                u_right: o.u_right,
            };
            let measured = StereoMeasurement {
                x: o.x,
                u_right: o.u_right,
                y: o.y,
            };
            let Some(track) = self.tracks.get(&o.landmark_id) else {
                self.tracks
                    .insert(o.landmark_id, LandmarkTrack::new(o.landmark_id, obs, world));
                continue;
            };
            let mut track = track.clone();
            if track.n_poses_seen == 1 {
                // Re-express the first sighting with the latest estimate of its pose.
                let first = track.observations[0];
                let pc_first = self.camera_point(&StereoObservation {
                    landmark_id: o.landmark_id,
                    x: first.x,
                    u_right: first.u_right,
                    y: first.y,
                })?;
                track.current_estimate = self.poses[first.pose_index].transform_point(&pc_first);
            }
            let estimate = update_landmark_estimate(&track, &world)?;
            track.current_estimate = estimate;
            track.observations.push(obs);
            track.n_poses_seen += 1;

            if track.n_poses_seen == 2 {
                self.add_landmark(o.landmark_id, estimate)?;
                let first = track.observations[0];
                self.add_stereo_factor(
                    first.pose_index,
                    o.landmark_id,
                    StereoMeasurement {
                        x: first.x,
                        u_right: first.u_right,
                        y: first.y,
                    },
                )?;
            } else {
                let slot = self.landmark_index[&o.landmark_id];
                self.landmarks[slot] = estimate;
            }
            self.add_stereo_factor(pose_index, o.landmark_id, measured)?;
            self.tracks.insert(o.landmark_id, track);
        }
        Ok(pose_index)
    }

    fn camera_point(&self, o: &StereoObservation) -> Result<Vector3<f64>> {
        geometry::unproject(
            &StereoMatch {
                left: Keypoint2D::new(o.x, o.y),
                u_right: o.u_right,
                cost: 0.0,
            },
            &self.rig,
        )
    }

    /// Removes a landmark, its track and its stereo factors. Later
    /// observations of the same id are ignored.
    pub fn reject_landmark(&mut self, id: u64) {
        self.rejected.insert(id);
        self.tracks.remove(&id);
        let Some(slot) = self.landmark_index.remove(&id) else {
            return;
        };
        self.landmarks.remove(slot);
        self.landmark_ids.remove(slot);
        for v in self.landmark_index.values_mut() {
            if *v > slot {
                *v -= 1;
            }
        }
        self.stereo_factors.retain(|f| f.landmark != slot);
        for f in &mut self.stereo_factors {
            if f.landmark > slot {
                f.landmark -= 1;
            }
        }
        self.factor_keys = self.stereo_factors.iter().map(|f| (f.pose, f.landmark)).collect();
    }

    /// Whitened residual norm of every stereo factor; infinite when the
    /// landmark is behind the camera.
    pub fn stereo_residual_norms(&self, pixel_sigma: f64) -> Vec<f64> {
        self.stereo_factors
            .iter()
            .map(|f| {
                stereo_residual(&self.poses[f.pose], &self.landmarks[f.landmark], &f.measured, &self.rig)
                    .map_or(f64::INFINITY, |r| r.norm() / pixel_sigma)
            })
            .collect()
    }

    /// Removes the given stereo factors. Landmarks left with fewer than two
    /// factors are rejected; their ids are returned.
    pub fn remove_stereo_factors(&mut self, indices: &[usize]) -> Vec<u64> {
        let drop: HashSet<usize> = indices.iter().copied().collect();
        let mut k = 0;
        self.stereo_factors.retain(|_| {
            k += 1;
            !drop.contains(&(k - 1))
        });
        self.factor_keys = self.stereo_factors.iter().map(|f| (f.pose, f.landmark)).collect();
        let orphans: Vec<u64> = self
            .factors_by_landmark()
            .iter()
            .enumerate()
            .filter(|(_, f)| f.len() < 2)
            .map(|(slot, _)| self.landmark_ids[slot])
            .collect();
        for id in &orphans {
            self.reject_landmark(*id);
        }
        orphans
    }

    pub fn is_rejected(&self, id: u64) -> bool {
        self.rejected.contains(&id)
    }

    /// Writes optimized values back and records them on the tracks.
    pub fn apply_solution(&mut self, poses: &[PoseSE3], landmarks: &[Vector3<f64>]) {
        self.poses.copy_from_slice(poses);
        self.landmarks.copy_from_slice(landmarks);
        self.commit_estimates();
    }

    /// Marks the current landmark values as the latest optimized ones.
    pub fn commit_estimates(&mut self) {
        for (slot, id) in self.landmark_ids.iter().enumerate() {
            if let Some(t) = self.tracks.get_mut(id) {
                t.last_optimized = Some(self.landmarks[slot]);
                t.current_estimate = self.landmarks[slot];
            }
        }
    }

    /// Factor indices grouped by landmark slot.
    pub fn factors_by_landmark(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.landmarks.len()];
        for (k, f) in self.stereo_factors.iter().enumerate() {
            out[f.landmark].push(k);
        }
        out
    }

    /// Structural invariants: references resolve, every landmark has at
    /// least two stereo factors, and every pose is chained to pose 0.
    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Ok(());
        }
        if self.gauge_prior.is_none() {
            return Err(Error::Validation("missing gauge prior".into()));
        }
        for (slot, factors) in self.factors_by_landmark().iter().enumerate() {
            if factors.len() < 2 {
                return Err(Error::Validation(format!(
                    "landmark {} has {} stereo factors",
                    self.landmark_ids[slot],
                    factors.len()
                )));
            }
        }
        let mut parent: Vec<usize> = (0..self.poses.len()).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            p[i] = r;
            r
        }
        for m in &self.motion_factors {
            let (a, b) = (find(&mut parent, m.from), find(&mut parent, m.to));
            parent[a] = b;
        }
        // Landmarks also connect the poses observing them.
        for factors in self.factors_by_landmark() {
            for w in factors.windows(2) {
                let (a, b) = (
                    find(&mut parent, self.stereo_factors[w[0]].pose),
                    find(&mut parent, self.stereo_factors[w[1]].pose),
                );
                parent[a] = b;
            }
        }
        let root = find(&mut parent, 0);
        for i in 0..self.poses.len() {
            if find(&mut parent, i) != root {
                return Err(Error::Validation(format!("pose {i} not connected to pose 0")));
            }
        }
        Ok(())
    }
}
