//! Frame-by-frame SLAM over a detection sequence: stereo association,
//! unprojection, temporal association and relative pose, graph update and
//! batch optimization, then map densification and cleanup.

use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::assoc::{associate, Assignment};
use crate::backend::{optimize, FactorGraphProblem, LandmarkRow, StereoObservation};
use crate::config::PipelineConfig;
use crate::error::{Error, Result, Variable};
use crate::eval::{estimated_arc_length, FailureReason, FrameMatchCounts, RunReport};
use crate::geometry::{self, estimate_relative_pose};
use crate::postprocess::{dedupe, densify, variance_filter};
use crate::types::{CoordFrame, DetectionFrame, PointCloud3D, PoseSE3, StereoMatch, TrajectoryEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Batch-optimize every `k`-th frame (and always the last one). 1 solves
    /// after every frame.
    pub optimize_stride: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { optimize_stride: 1 }
    }
}

/// Wall-clock seconds spent per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub association_s: f64,
    pub tracking_s: f64,
    pub optimization_s: f64,
    pub postprocess_s: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub trajectory: TrajectoryEstimate,
    pub landmarks: Vec<LandmarkRow>,
    /// Densified, deduplicated and variance-filtered map.
    pub map: PointCloud3D,
    pub report: RunReport,
    /// Stereo assignment of every processed frame.
    pub stereo_assignments: Vec<Assignment>,
    /// Temporal assignment into each processed frame from its predecessor;
    /// empty for the first frame.
    pub temporal_assignments: Vec<Assignment>,
    /// Human-readable cause when the run stopped early.
    pub failure_message: Option<String>,
    pub timings: StageTimings,
}

/// Stereo-matched centers of one frame in its camera frame.
struct StereoFrame {
    assignment: Assignment,
    cloud: PointCloud3D,
    /// For each left keypoint, its index in `cloud` if it was triangulated.
    point_of_left: Vec<Option<usize>>,
}

fn triangulate(frame: &DetectionFrame, cfg: &PipelineConfig) -> StereoFrame {
    let assignment = associate(&frame.left, &frame.right, &cfg.assoc);
    let mut points = Vec::new();
    let mut point_of_left = vec![None; frame.left.len()];
    for &(i, j, cost) in &assignment.pairs {
        let m = StereoMatch {
            left: frame.left[i],
            u_right: frame.right[j].x,
            cost,
        };
        // Pairs with non-positive or tiny disparity carry no usable depth.
        if let Ok(p) = geometry::unproject(&m, &cfg.rig) {
            point_of_left[i] = Some(points.len());
            points.push(p);
        }
    }
    StereoFrame {
        assignment,
        cloud: PointCloud3D::new(points, CoordFrame::Camera(frame.frame_index)),
        point_of_left,
    }
}

fn failure_reason(e: &Error) -> FailureReason {
    match e {
        Error::Tracking(t) => t.into(),
        _ => FailureReason::OptimizerDivergence,
    }
}

/// Runs the whole pipeline. Tracking and optimizer failures end the run
/// early and are recorded in the report; other errors are returned.
pub fn run_slam(frames: &[DetectionFrame], cfg: &PipelineConfig, opts: &PipelineOptions) -> Result<PipelineOutput> {
    cfg.validate()?;
    if opts.optimize_stride == 0 {
        return Err(Error::Validation("optimize_stride must be at least 1".into()));
    }
    let mut timings = StageTimings::default();
    let mut graph = FactorGraphProblem::new(cfg.rig, cfg.icp.motion_direction);
    let mut trajectory = TrajectoryEstimate::default();
    let mut stereo_assignments = Vec::new();
    let mut temporal_assignments = Vec::new();
    let mut counts = Vec::new();
    let mut failure: Option<(u64, Error)> = None;
    let mut next_landmark_id = 0u64;
    // Landmark id per left keypoint of the previous frame.
    let mut prev: Option<(StereoFrame, Vec<u64>)> = None;

    for (k, frame) in frames.iter().enumerate() {
        let clock = Instant::now();
        let stereo = triangulate(frame, cfg);
        let temporal = match &prev {
            Some(_) => associate(&frames[k - 1].left, &frame.left, &cfg.assoc),
            None => Assignment::default(),
        };
        timings.association_s += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let mut ids = vec![u64::MAX; frame.left.len()];
        let relative = match &prev {
            None => Ok(PoseSE3::identity()),
            Some((prev_stereo, prev_ids)) => {
                let mut correspondences = Vec::new();
                for &(i, j, _) in &temporal.pairs {
                    ids[j] = prev_ids[i];
                    if let (Some(p), Some(q)) = (prev_stereo.point_of_left[i], stereo.point_of_left[j]) {
                        correspondences.push((p, q));
                    }
                }
                estimate_relative_pose(&prev_stereo.cloud, &stereo.cloud, &correspondences, &cfg.icp)
            }
        };
        let relative = match relative {
            Ok(r) => r,
            Err(e) => {
                log::warn!("frame {}: tracking lost: {e}", frame.frame_index);
                failure = Some((frame.frame_index, e));
                break;
            }
        };
        for id in ids.iter_mut().filter(|id| **id == u64::MAX) {
            *id = next_landmark_id;
            next_landmark_id += 1;
        }
        let pose = match graph.poses.last() {
            Some(last) => last.compose(&relative),
            None => PoseSE3::identity(),
        };
        let observations: Vec<StereoObservation> = stereo
            .assignment
            .pairs
            .iter()
            .filter(|(i, _, _)| stereo.point_of_left[*i].is_some())
            .map(|&(i, j, _)| StereoObservation {
                landmark_id: ids[i],
                x: frame.left[i].x,
                u_right: frame.right[j].x,
                y: frame.left[i].y,
            })
            .collect();
        graph.add_frame(pose, relative, &observations)?;
        timings.tracking_s += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let last = k + 1 == frames.len();
        if graph.poses.len() > 1 && ((k % opts.optimize_stride) == 0 || last) {
            match solve(&mut graph, cfg) {
                Ok(()) => {}
                Err(e @ (Error::Divergence { .. } | Error::Singular { .. })) => {
                    log::warn!("frame {}: optimizer failed: {e}", frame.frame_index);
                    timings.optimization_s += clock.elapsed().as_secs_f64();
                    // The frame was added but never refined; keep only what was solved.
                    graph.poses.pop();
                    failure = Some((frame.frame_index, e));
                    break;
                }
                Err(e) => return Err(e),
            }
        } else {
            // Unoptimized frames still give later sightings a running average.
            graph.commit_estimates();
        }
        timings.optimization_s += clock.elapsed().as_secs_f64();

        trajectory.frames.push(frame.frame_index);
        counts.push(FrameMatchCounts {
            frame: frame.frame_index,
            stereo: stereo.cloud.len(),
            temporal: temporal.pairs.len(),
        });
        stereo_assignments.push(stereo.assignment.clone());
        temporal_assignments.push(temporal);
        prev = Some((stereo, ids));
    }
    trajectory.poses = graph.poses[..trajectory.frames.len()].to_vec();

    let landmarks = landmark_rows(&graph);

    let clock = Instant::now();
    let processed = &frames[..trajectory.len()];
    let dense = densify(processed, &stereo_assignments, &trajectory, &cfg.rig, &cfg.post)?;
    let map = variance_filter(&dedupe(&dense.cloud, &cfg.post), &cfg.post);
    timings.postprocess_s += clock.elapsed().as_secs_f64();

    let report = RunReport {
        max_distance_mapped_m: estimated_arc_length(&trajectory),
        range_length_m: None,
        fraction_mapped: None,
        ate_rmse_m: None,
        landmark_precision: None,
        landmark_recall: None,
        failure_reason: failure.as_ref().map_or(FailureReason::None, |(_, e)| failure_reason(e)),
        failure_frame: failure.as_ref().map(|(f, _)| *f),
        n_map_points: map.len(),
        per_frame_match_counts: counts,
    };
    Ok(PipelineOutput {
        trajectory,
        landmarks,
        map,
        report,
        stereo_assignments,
        temporal_assignments,
        failure_message: failure.map(|(f, e)| format!("frame {f}: {e}")),
        timings,
    })
}

/// Batch solve. A landmark whose normal equations degenerate (typically a
/// wrong association pushed towards infinity) is dropped and the solve
/// repeated. With an outlier threshold set, stereo factors left far from
/// the solution are removed and the solve repeated as well.
fn solve(graph: &mut FactorGraphProblem, cfg: &PipelineConfig) -> Result<()> {
    const MAX_ROUNDS: usize = 32;
    for _ in 0..MAX_ROUNDS {
        match optimize(graph, &cfg.backend) {
            Ok(result) => graph.apply_solution(&result.poses, &result.landmarks),
            Err(Error::Singular {
                variable: Variable::Landmark(id),
            }) => {
                log::info!("dropping under-constrained landmark {id}");
                graph.reject_landmark(id);
                continue;
            }
            Err(e) => return Err(e),
        }
        let Some(threshold) = cfg.backend.outlier_threshold else {
            return Ok(());
        };
        let outliers: Vec<usize> = graph
            .stereo_residual_norms(cfg.backend.pixel_sigma)
            .iter()
            .enumerate()
            .filter(|(_, r)| **r > threshold)
            .map(|(k, _)| k)
            .collect();
        if outliers.is_empty() {
            return Ok(());
        }
        log::debug!("removing {} outlying stereo factors", outliers.len());
        graph.remove_stereo_factors(&outliers);
    }
    log::warn!("outlier removal did not settle after {MAX_ROUNDS} rounds");
    Ok(())
}

fn landmark_rows(graph: &FactorGraphProblem) -> Vec<LandmarkRow> {
    let tracks = graph.tracks();
    graph
        .landmark_ids
        .iter()
        .zip(&graph.landmarks)
        .map(|(id, p): (&u64, &Vector3<f64>)| LandmarkRow {
            id: *id,
            position: *p,
            n_observations: tracks.get(id).map_or(0, |t| t.observations.len()),
        })
        .collect()
}
