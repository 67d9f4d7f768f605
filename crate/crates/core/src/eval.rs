//! Run metrics against simulator ground truth: distance mapped before
//! failure, trajectory error, and map precision/recall.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TrackingFailure};
use crate::sim::GroundTruth;
use crate::types::{PointCloud3D, TrajectoryEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    None,
    TooFewMatches,
    TranslationBound,
    OptimizerDivergence,
}

impl From<&TrackingFailure> for FailureReason {
    fn from(f: &TrackingFailure) -> Self {
        match f {
            TrackingFailure::TooFewMatches { .. } => FailureReason::TooFewMatches,
            TrackingFailure::TranslationBound { .. } => FailureReason::TranslationBound,
        }
    }
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FailureReason::None => "none",
            FailureReason::TooFewMatches => "too_few_matches",
            FailureReason::TranslationBound => "translation_bound",
            FailureReason::OptimizerDivergence => "optimizer_divergence",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMatchCounts {
    pub frame: u64,
    pub stereo: usize,
    /// Accepted temporal pairs with the previous frame; zero for the first frame.
    pub temporal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub max_distance_mapped_m: f64,
    /// Absent when no ground truth was available.
    pub range_length_m: Option<f64>,
    pub fraction_mapped: Option<f64>,
    pub ate_rmse_m: Option<f64>,
    pub landmark_precision: Option<f64>,
    pub landmark_recall: Option<f64>,
    pub failure_reason: FailureReason,
    /// First frame that could not be tracked.
    pub failure_frame: Option<u64>,
    pub n_map_points: usize,
    pub per_frame_match_counts: Vec<FrameMatchCounts>,
}

impl RunReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::io(path, e.into()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Fills the ground-truth metrics in place.
    pub fn attach_ground_truth(
        &mut self,
        trajectory: &TrajectoryEstimate,
        map: &PointCloud3D,
        gt: &GroundTruth,
        match_radius_m: f64,
    ) -> Result<()> {
        let range = gt.config.range_length_m;
        self.max_distance_mapped_m = max_distance_mapped(trajectory, self.failure_frame, gt);
        self.range_length_m = Some(range);
        self.fraction_mapped = Some(if range > 0.0 {
            (self.max_distance_mapped_m / range).clamp(0.0, 1.0)
        } else {
            1.0
        });
        self.ate_rmse_m = if trajectory.is_empty() {
            None
        } else {
            Some(ate_rmse(trajectory, gt)?)
        };
        let visible = visible_landmarks(gt, trajectory);
        let (p, r) = landmark_pr(map, gt, &visible, match_radius_m);
        self.landmark_precision = Some(p);
        self.landmark_recall = Some(r);
        Ok(())
    }
}

/// Ground-truth arc length from frame 0 to the failure frame, or the whole
/// range when tracking never failed.
pub fn max_distance_mapped(trajectory: &TrajectoryEstimate, failure_frame: Option<u64>, gt: &GroundTruth) -> f64 {
    let range = gt.config.range_length_m;
    match failure_frame {
        Some(f) => gt.arc_length_to(f as usize).min(range),
        None if trajectory.is_empty() => 0.0,
        None => range,
    }
}

/// Arc length of an estimated trajectory; the distance metric when no
/// ground truth exists.
pub fn estimated_arc_length(trajectory: &TrajectoryEstimate) -> f64 {
    trajectory
        .poses
        .windows(2)
        .map(|w| (w[1].translation - w[0].translation).norm())
        .sum()
}

/// RMS translation error over the estimated frames, after expressing the
/// estimate in the ground-truth world through the first pose only.
pub fn ate_rmse(estimated: &TrajectoryEstimate, gt: &GroundTruth) -> Result<f64> {
    if estimated.is_empty() {
        return Err(Error::Contract("empty trajectory".into()));
    }
    let missing: Vec<u64> = estimated
        .frames
        .iter()
        .copied()
        .filter(|&f| f as usize >= gt.poses.len())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "frames without ground truth: {missing:?}"
        )));
    }
    let f0 = estimated.frames[0] as usize;
    let align = gt.poses[f0].compose(&estimated.poses[0].inverse());
    let sum: f64 = estimated
        .frames
        .iter()
        .zip(&estimated.poses)
        .map(|(&f, p)| (align.compose(p).translation - gt.poses[f as usize].translation).norm_squared())
        .sum();
    Ok((sum / estimated.len() as f64).sqrt())
}

/// Landmarks visible in any frame the trajectory covers.
pub fn visible_landmarks(gt: &GroundTruth, trajectory: &TrajectoryEstimate) -> BTreeSet<u64> {
    let frames: BTreeSet<u64> = trajectory.frames.iter().copied().collect();
    gt.frames
        .iter()
        .filter(|l| frames.contains(&l.frame))
        .flat_map(|l| l.visible.iter().copied())
        .collect()
}

/// Greedy one-to-one matching by ascending distance. Returns the number of
/// matched pairs.
pub fn greedy_match_count(map: &[nalgebra::Vector3<f64>], truth: &[nalgebra::Vector3<f64>], radius: f64) -> usize {
    let mut candidates = Vec::new();
    for (i, p) in map.iter().enumerate() {
        for (j, q) in truth.iter().enumerate() {
            let d = (p - q).norm();
            if d <= radius {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut used_map = vec![false; map.len()];
    let mut used_truth = vec![false; truth.len()];
    let mut count = 0;
    for (_, i, j) in candidates {
        if !used_map[i] && !used_truth[j] {
            used_map[i] = true;
            used_truth[j] = true;
            count += 1;
        }
    }
    count
}

/// `(precision, recall)` of a map against the visible ground-truth landmarks.
/// An empty map has precision 1; an empty visible set has recall 1.
pub fn landmark_pr(map: &PointCloud3D, gt: &GroundTruth, visible: &BTreeSet<u64>, match_radius_m: f64) -> (f64, f64) {
    let truth: Vec<_> = visible
        .iter()
        .filter_map(|id| gt.landmark_positions.get(id).copied())
        .collect();
    let matched = greedy_match_count(&map.points, &truth, match_radius_m) as f64;
    let precision = if map.is_empty() { 1.0 } else { matched / map.len() as f64 };
    let recall = if truth.is_empty() { 1.0 } else { matched / truth.len() as f64 };
    (precision, recall)
}

/// One row per run plus nothing else; the mean fraction goes to the caller.
pub fn write_aggregate_csv(path: &Path, runs: &[(String, RunReport)]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(
        out,
        "run,range_length_m,max_distance_mapped_m,fraction_mapped,ate_rmse_m,landmark_precision,landmark_recall,failure_reason,n_map_points"
    )
    .map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, r) in runs {
        writeln!(
            out,
            "{name},{},{},{},{},{},{},{},{}",
            opt(r.range_length_m),
            r.max_distance_mapped_m,
            opt(r.fraction_mapped),
            opt(r.ate_rmse_m),
            opt(r.landmark_precision),
            opt(r.landmark_recall),
            r.failure_reason,
            r.n_map_points
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Mean of the available `fraction_mapped` values.
pub fn mean_fraction_mapped(runs: &[RunReport]) -> Option<f64> {
    let v: Vec<f64> = runs.iter().filter_map(|r| r.fraction_mapped).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
