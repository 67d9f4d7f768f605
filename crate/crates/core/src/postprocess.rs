//! Map densification and cleanup: every detected center becomes a world
//! point, near-duplicates are suppressed, and points whose neighbor
//! distances vary too much are rejected.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assoc::Assignment;
use crate::error::{Error, Result};
use crate::geometry::{self, MIN_DISPARITY_PX};
use crate::types::{CameraRig, CoordFrame, DetectionFrame, PointCloud3D, StereoMatch, TrajectoryEstimate};

/// Below this many points neighbor queries are answered by brute force.
const BRUTE_FORCE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackDepth {
    /// Depth of the nearest stereo-matched center in the same left image.
    NearestStereoNeighbor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessConfig {
    pub dedupe_radius_m: f64,
    pub variance_neighbors: usize,
    pub variance_threshold_m2: f64,
    pub fallback_depth: FallbackDepth,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            dedupe_radius_m: 0.004,
            variance_neighbors: 5,
            variance_threshold_m2: 1e-4,
            fallback_depth: FallbackDepth::NearestStereoNeighbor,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dedupe_radius_m > 0.0 && self.dedupe_radius_m.is_finite()) {
            return Err(Error::Validation("dedupe_radius_m must be positive".into()));
        }
        if self.variance_neighbors < 2 {
            return Err(Error::Validation("variance_neighbors must be at least 2".into()));
        }
        if !(self.variance_threshold_m2 >= 0.0) {
            return Err(Error::Validation("variance_threshold_m2 must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Densified {
    pub cloud: PointCloud3D,
    /// Unmatched centers dropped because their frame had no usable stereo match.
    pub skipped: usize,
}

/// Projects every left-image center of every frame into the world.
///
/// `matches[k]` is the stereo assignment (left as U, right as V) of
/// `frames[k]`. Matched centers use their own disparity; the rest borrow the
/// depth of the nearest matched center in the same image.
pub fn densify(
    frames: &[DetectionFrame],
    matches: &[Assignment],
    poses: &TrajectoryEstimate,
    rig: &CameraRig,
    cfg: &PostprocessConfig,
) -> Result<Densified> {
    if frames.len() != matches.len() {
        return Err(Error::Contract(format!(
            "{} frames but {} stereo assignments",
            frames.len(),
            matches.len()
        )));
    }
    let FallbackDepth::NearestStereoNeighbor = cfg.fallback_depth;
    let mut points = Vec::new();
    let mut skipped = 0usize;
    for (frame, assignment) in frames.iter().zip(matches) {
        let pose = poses.pose_of(frame.frame_index).ok_or_else(|| {
            Error::Contract(format!("no pose for frame {}", frame.frame_index))
        })?;
        let mut cam: Vec<Option<Vector3<f64>>> = vec![None; frame.left.len()];
        for &(i, j, cost) in &assignment.pairs {
            let m = StereoMatch {
                left: frame.left[i],
                u_right: frame.right[j].x,
                cost,
            };
            cam[i] = geometry::unproject_with_floor(&m, rig, MIN_DISPARITY_PX).ok();
        }
        let anchors: Vec<(usize, f64)> = cam
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (i, p.z)))
            .collect();
        for (i, kp) in frame.left.iter().enumerate() {
            let pc = match cam[i] {
                Some(p) => p,
                None => {
                    let nearest = anchors.iter().min_by(|a, b| {
                        frame.left[a.0]
                            .dist(kp)
                            .total_cmp(&frame.left[b.0].dist(kp))
                    });
                    match nearest {
                        Some(&(_, depth)) => geometry::back_project(kp.x, kp.y, depth, rig),
                        None => {
                            skipped += 1;
                            continue;
                        }
                    }
                }
            };
            points.push(pose.transform_point(&pc));
        }
    }
    if skipped > 0 {
        log::warn!("densify: skipped {skipped} centers in frames without stereo matches");
    }
    Ok(Densified {
        cloud: PointCloud3D::world(points),
        skipped,
    })
}

/// Uniform hash grid for radius and nearest-neighbor queries.
struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: &Vector3<f64>) -> (i64, i64, i64) {
        let k = |v: f64| (v / self.cell).floor() as i64;
        (k(p.x), k(p.y), k(p.z))
    }

    fn insert(&mut self, p: &Vector3<f64>, index: usize) {
        self.cells.entry(self.key(p)).or_default().push(index);
    }

    /// Indices in the cubic shell at Chebyshev cell distance `s` around `p`.
    fn shell(&self, p: &Vector3<f64>, s: i64, out: &mut Vec<usize>) {
        let (cx, cy, cz) = self.key(p);
        for dx in -s..=s {
            for dy in -s..=s {
                for dz in -s..=s {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != s {
                        continue;
                    }
                    if let Some(v) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        out.extend_from_slice(v);
                    }
                }
            }
        }
    }
}

/// Greedy suppression in input order: a point is kept only if no kept point
/// lies strictly closer than the dedupe radius.
pub fn dedupe(points: &PointCloud3D, cfg: &PostprocessConfig) -> PointCloud3D {
    let t = cfg.dedupe_radius_m;
    let mut kept: Vec<Vector3<f64>> = Vec::new();
    if points.len() < BRUTE_FORCE_LIMIT {
        for p in &points.points {
            if kept.iter().all(|q| (q - p).norm() >= t) {
                kept.push(*p);
            }
        }
    } else {
        // Cells of size 2T: every point within T lies in the 27-cell block.
        let mut grid = Grid::new(2.0 * t);
        let mut near = Vec::new();
        for p in &points.points {
            near.clear();
            grid.shell(p, 0, &mut near);
            grid.shell(p, 1, &mut near);
            if near.iter().all(|&k| (kept[k] - p).norm() >= t) {
                grid.insert(p, kept.len());
                kept.push(*p);
            }
        }
    }
    PointCloud3D::new(kept, points.frame)
}

fn population_variance(d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Sorted distances from point `i` to its `k` nearest other points.
fn knn_distances_brute(points: &[Vector3<f64>], i: usize, k: usize) -> Vec<f64> {
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, q)| (q - points[i]).norm())
        .collect();
    d.sort_by(f64::total_cmp);
    d.truncate(k);
    d
}

fn knn_distances_grid(grid: &Grid, points: &[Vector3<f64>], i: usize, k: usize) -> Vec<f64> {
    let p = &points[i];
    let mut d: Vec<f64> = Vec::new();
    let mut shell = Vec::new();
    let mut seen = 0usize;
    for s in 0.. {
        shell.clear();
        grid.shell(p, s, &mut shell);
        seen += shell.len();
        d.extend(shell.iter().filter(|&&j| j != i).map(|&j| (points[j] - p).norm()));
        d.sort_by(f64::total_cmp);
        // Points outside the searched block are at least s cells away.
        if (d.len() >= k && d[k - 1] <= s as f64 * grid.cell) || seen >= points.len() {
            break;
        }
    }
    d.truncate(k);
    d
}

/// Population variance of the distances to the `N` nearest neighbors of
/// each point.
pub fn neighbor_distance_variances(points: &[Vector3<f64>], n: usize) -> Vec<f64> {
    if points.len() < BRUTE_FORCE_LIMIT {
        (0..points.len())
            .into_par_iter()
            .map(|i| population_variance(&knn_distances_brute(points, i, n)))
            .collect()
    } else {
        let (lo, hi) = points.iter().fold(
            (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), p| (lo.inf(p), hi.sup(p)),
        );
        // Roughly n points per cell on average.
        let extent = (hi - lo).map(|v| v.max(1e-9));
        let volume = extent.x * extent.y * extent.z;
        let cell = (volume * n as f64 / points.len() as f64).cbrt().max(1e-9);
        let mut grid = Grid::new(cell);
        for (i, p) in points.iter().enumerate() {
            grid.insert(p, i);
        }
        (0..points.len())
            .into_par_iter()
            .map(|i| population_variance(&knn_distances_grid(&grid, points, i, n)))
            .collect()
    }
}

/// Single pass: decisions are made on the input cloud.
pub fn variance_filter(points: &PointCloud3D, cfg: &PostprocessConfig) -> PointCloud3D {
    let n = cfg.variance_neighbors;
    if points.len() <= n {
        log::warn!(
            "variance filter needs more than {n} points, got {}; cloud left unchanged",
            points.len()
        );
        return points.clone();
    }
    let variances = neighbor_distance_variances(&points.points, n);
    let kept = points
        .points
        .iter()
        .zip(&variances)
        .filter(|(_, v)| **v <= cfg.variance_threshold_m2)
        .map(|(p, _)| *p)
        .collect();
    PointCloud3D::new(kept, points.frame)
}

/// ASCII PLY with one `x y z` vertex per point, in meters.
pub fn write_ply(path: &Path, cloud: &PointCloud3D) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    )
    .map_err(io)?;
    for p in &cloud.points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads the vertices of an ASCII PLY written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<PointCloud3D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let mut n = None;
    for (_, line) in lines.by_ref() {
        if let Some(count) = line.strip_prefix("element vertex ") {
            n = count.trim().parse::<usize>().ok();
        }
        if line == "end_header" {
            break;
        }
    }
    let n = n.ok_or_else(|| Error::Parse {
        line: 0,
        message: "missing vertex count".into(),
    })?;
    let mut points = Vec::with_capacity(n);
    for (i, line) in lines.take(n) {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if v.len() < 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: "expected x y z".into(),
            });
        }
        points.push(Vector3::new(v[0], v[1], v[2]));
    }
    Ok(PointCloud3D::new(points, CoordFrame::World))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Keypoint2D, PoseSE3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> PostprocessConfig {
        PostprocessConfig::default()
    }

    fn rig() -> CameraRig {
        CameraRig::default()
    }

    fn min_pairwise(points: &[Vector3<f64>]) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                m = m.min((points[i] - points[j]).norm());
            }
        }
        m
    }

    #[test]
    fn dedupe_threshold_rule() {
        let t = cfg().dedupe_radius_m;
        let a = Vector3::new(0.0, 0.0, 1.0);
        let close = PointCloud3D::world(vec![a, a + Vector3::new(0.5 * t, 0.0, 0.0)]);
        assert_eq!(dedupe(&close, &cfg()).points, vec![a]);
        let far = PointCloud3D::world(vec![a, a + Vector3::new(2.0 * t, 0.0, 0.0)]);
        assert_eq!(dedupe(&far, &cfg()).len(), 2);
    }

    fn clusters(rng: &mut ChaCha8Rng, n: usize, k: usize, t: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for c in 0..n {
            let center = Vector3::new(c as f64 * 10.0 * t, 0.0, 1.0);
            for _ in 0..k {
                let off = Vector3::from_fn(|_, _| rng.random_range(-0.2 * t..0.2 * t));
                pts.push(center + off);
            }
        }
        pts
    }

    #[test]
    fn one_survivor_per_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = cfg().dedupe_radius_m;
        let pts = clusters(&mut rng, 12, 7, t);
        assert_eq!(dedupe(&PointCloud3D::world(pts), &cfg()).len(), 12);
    }

    #[test]
    fn grid_dedupe_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = cfg().dedupe_radius_m;
        let pts: Vec<_> = (0..3000)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(0.0..40.0 * t)))
            .collect();
        let via_grid = dedupe(&PointCloud3D::world(pts.clone()), &cfg());
        let mut brute: Vec<Vector3<f64>> = Vec::new();
        for p in &pts {
            if brute.iter().all(|q| (q - p).norm() >= t) {
                brute.push(*p);
            }
        }
        assert_eq!(via_grid.points, brute);
        assert!(min_pairwise(&via_grid.points) >= t);
    }

    proptest! {
        #[test]
        fn dedupe_spacing_invariant(raw in prop::collection::vec((0.0f64..0.05, 0.0f64..0.05, 0.9f64..0.95), 1..200)) {
            let pts: Vec<_> = raw.iter().map(|(x, y, z)| Vector3::new(*x, *y, *z)).collect();
            let out = dedupe(&PointCloud3D::world(pts), &cfg());
            prop_assert!(min_pairwise(&out.points) >= cfg().dedupe_radius_m);
        }
    }

    #[test]
    fn grid_points_have_zero_variance() {
        let mut pts = Vec::new();
        for i in -3..=3 {
            for j in -3..=3 {
                pts.push(Vector3::new(i as f64 * 0.01, j as f64 * 0.01, 1.0));
            }
        }
        let c = PostprocessConfig {
            variance_neighbors: 4,
            variance_threshold_m2: 1e-12,
            ..cfg()
        };
        let v = neighbor_distance_variances(&pts, 4);
        let center = pts.iter().position(|p| p.x == 0.0 && p.y == 0.0).unwrap();
        assert!(v[center].abs() < 1e-18);
        assert!(variance_filter(&PointCloud3D::world(pts), &c).points.contains(&Vector3::new(0.0, 0.0, 1.0)));
    }

    /// Four points on a unit square plus one planted on the far side of a
    /// corner. With N = 3:
    /// square corner: distances {1, 1, sqrt 2} -> variance 2(sqrt2 - 1)^2 / 9 ~ 0.0381
    /// outlier at (3, 0): distances {2, sqrt 5, 3} -> variance ~ 0.1844
    #[test]
    fn planted_outlier_is_removed() {
        let mut pts = vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 1.0),
            Vector3::new(1.0, 1.0, 1.0),
        ];
        let outlier = Vector3::new(3.0, 0.0, 1.0);
        pts.push(outlier);
        let v = neighbor_distance_variances(&pts, 3);
        let s2 = 2f64.sqrt();
        let corner = {
            let d = [1.0, 1.0, s2];
            let m = (2.0 + s2) / 3.0;
            d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0
        };
        let far = {
            let d = [2.0, 5f64.sqrt(), 3.0];
            let m = d.iter().sum::<f64>() / 3.0;
            d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0
        };
        // (0,0) and (0,1) see the outlier only beyond their third neighbor.
        assert!((v[0] - corner).abs() < 1e-12);
        assert!((v[4] - far).abs() < 1e-12);
        let c = PostprocessConfig {
            variance_neighbors: 3,
            variance_threshold_m2: 0.1,
            ..cfg()
        };
        let out = variance_filter(&PointCloud3D::world(pts.clone()), &c);
        assert_eq!(out.points, pts[..4].to_vec());
    }

    #[test]
    fn infinite_threshold_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<_> = (0..300).map(|_| Vector3::from_fn(|_, _| rng.random::<f64>())).collect();
        let c = PostprocessConfig {
            variance_threshold_m2: f64::INFINITY,
            ..cfg()
        };
        assert_eq!(variance_filter(&PointCloud3D::world(pts), &c).len(), 300);
    }

    #[test]
    fn too_few_points_unchanged() {
        let pts = PointCloud3D::world(vec![Vector3::zeros(), Vector3::x()]);
        assert_eq!(variance_filter(&pts, &cfg()), pts);
    }

    #[test]
    fn grid_knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<_> = (0..2500)
            .map(|_| Vector3::new(rng.random_range(0.0..2.0), rng.random_range(0.0..0.5), rng.random_range(0.9..1.1)))
            .collect();
        let fast = neighbor_distance_variances(&pts, 5);
        for i in (0..pts.len()).step_by(37) {
            let exact = population_variance(&knn_distances_brute(&pts, i, 5));
            assert!((fast[i] - exact).abs() < 1e-15, "point {i}");
        }
    }

    fn frame_with(left: Vec<Keypoint2D>, right: Vec<Keypoint2D>) -> DetectionFrame {
        DetectionFrame {
            frame_index: 0,
            timestamp: 0.0,
            left,
            right,
        }
    }

    fn one_pose() -> TrajectoryEstimate {
        TrajectoryEstimate {
            frames: vec![0],
            poses: vec![PoseSE3::from_translation(Vector3::new(0.5, 0.0, 0.0))],
        }
    }

    #[test]
    fn matched_centers_unproject_directly() {
        let r = rig();
        let frame = frame_with(
            vec![Keypoint2D::new(2100.0, 1500.0), Keypoint2D::new(2300.0, 1400.0)],
            vec![Keypoint2D::new(1770.0, 1500.0), Keypoint2D::new(1990.0, 1400.0)],
        );
        let a = Assignment {
            pairs: vec![(0, 0, 0.0), (1, 1, 0.0)],
            unmatched_u: vec![],
            unmatched_v: vec![],
        };
        let d = densify(std::slice::from_ref(&frame), &[a], &one_pose(), &r, &cfg()).unwrap();
        assert_eq!(d.skipped, 0);
        for (k, p) in d.cloud.points.iter().enumerate() {
            let m = StereoMatch {
                left: frame.left[k],
                u_right: frame.right[k].x,
                cost: 0.0,
            };
            let expected = one_pose().poses[0].transform_point(&geometry::unproject(&m, &r).unwrap());
            assert!((p - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn unmatched_center_borrows_nearest_depth() {
        let r = rig();
        // Matched center at depth 1.2 m: disparity f b / z = 275 px.
        let d_px = r.f * r.baseline_m / 1.2;
        let frame = frame_with(
            vec![
                Keypoint2D::new(2000.0, 1000.0),
                Keypoint2D::new(2005.0, 1000.0),
                Keypoint2D::new(3000.0, 2000.0),
            ],
            vec![Keypoint2D::new(2000.0 - d_px, 1000.0), Keypoint2D::new(2500.0, 2000.0)],
        );
        let a = Assignment {
            pairs: vec![(0, 0, 0.0), (2, 1, 0.0)],
            unmatched_u: vec![1],
            unmatched_v: vec![],
        };
        let pose = TrajectoryEstimate {
            frames: vec![0],
            poses: vec![PoseSE3::identity()],
        };
        let out = densify(&[frame], &[a], &pose, &r, &cfg()).unwrap();
        let p = out.cloud.points[1];
        assert!((p.z - 1.2).abs() < 1e-12);
        let expected = geometry::back_project(2005.0, 1000.0, 1.2, &r);
        assert!((p - expected).norm() < 1e-12);
        assert_eq!(out.cloud.len(), 3);
    }

    #[test]
    fn frames_without_matches_are_counted() {
        let frame = frame_with(vec![Keypoint2D::new(10.0, 10.0)], vec![]);
        let empty = frame_with(vec![], vec![]);
        let out = densify(
            &[frame, DetectionFrame { frame_index: 0, ..empty }],
            &[Assignment::default(), Assignment::default()],
            &TrajectoryEstimate {
                frames: vec![0],
                poses: vec![PoseSE3::identity()],
            },
            &rig(),
            &cfg(),
        )
        .unwrap();
        assert_eq!(out.skipped, 1);
        assert!(out.cloud.is_empty());
    }

    #[test]
    fn ply_round_trip() {
        let cloud = PointCloud3D::world(vec![Vector3::new(0.1, -0.2, 1.5), Vector3::new(3.0, 0.0, 0.25)]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_ply(f.path(), &cloud).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 2\n"));
        assert_eq!(read_ply(f.path()).unwrap(), cloud);
    }
}
