//! Stereo projection model and the translation-only frame-to-frame estimator.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TrackingFailure};
use crate::types::{CameraRig, PointCloud3D, PoseSE3, StereoMatch};

/// Disparities below this are rejected as unreliable depth.
pub const MIN_DISPARITY_PX: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcpConfig {
    /// Unit vector, world frame. Estimated translations are projected onto it.
    pub motion_direction: Vector3<f64>,
    pub min_correspondences: usize,
    pub max_translation_m: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            motion_direction: Vector3::x(),
            min_correspondences: 3,
            max_translation_m: 0.5,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.motion_direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "motion_direction must be a unit vector, norm is {}",
                self.motion_direction.norm()
            )));
        }
        if self.min_correspondences < 3 {
            return Err(Error::Validation("min_correspondences must be >= 3".into()));
        }
        if !(self.max_translation_m > 0.0) {
            return Err(Error::Validation("max_translation_m must be positive".into()));
        }
        Ok(())
    }
}

/// Triangulates a stereo match into the left camera frame.
pub fn unproject(m: &StereoMatch, rig: &CameraRig) -> Result<Vector3<f64>> {
    unproject_with_floor(m, rig, MIN_DISPARITY_PX)
}

pub fn unproject_with_floor(m: &StereoMatch, rig: &CameraRig, min_disparity: f64) -> Result<Vector3<f64>> {
    let d = m.disparity();
    if !(d > 0.0) {
        return Err(Error::DegenerateDisparity { disparity: d });
    }
    if d < min_disparity {
        return Err(Error::UnreliableDepth {
            disparity: d,
            floor: min_disparity,
        });
    }
    let z = rig.baseline_m * rig.f / d;
    Ok(Vector3::new(
        (m.left.x - rig.cx) * z / rig.f,
        (m.left.y - rig.cy) * z / rig.f,
        z,
    ))
}

/// Left-image point at the given depth along the ray through `(x, y)`.
pub fn back_project(x: f64, y: f64, depth: f64, rig: &CameraRig) -> Vector3<f64> {
    Vector3::new((x - rig.cx) * depth / rig.f, (y - rig.cy) * depth / rig.f, depth)
}

/// Stereo measurement `(x, y, u_right)` of a camera-frame point.
pub fn project(point: &Vector3<f64>, rig: &CameraRig) -> Result<(f64, f64, f64)> {
    if !(point.z > 0.0) {
        return Err(Error::BehindCamera { z: point.z });
    }
    let inv_z = 1.0 / point.z;
    Ok((
        rig.f * point.x * inv_z + rig.cx,
        rig.f * point.y * inv_z + rig.cy,
        rig.f * (point.x - rig.baseline_m) * inv_z + rig.cx,
    ))
}

/// Orthogonal projection of `t` onto the line spanned by the unit vector `dir`.
pub fn project_onto_direction(t: &Vector3<f64>, dir: &Vector3<f64>) -> Vector3<f64> {
    dir * t.dot(dir)
}

/// The `t` minimising `sum ||p_i + t - q_i||^2` over index pairs `(i into prev, j into curr)`.
pub fn closed_form_translation(
    prev: &PointCloud3D,
    curr: &PointCloud3D,
    correspondences: &[(usize, usize)],
) -> Result<Vector3<f64>> {
    if correspondences.is_empty() {
        return Err(Error::Contract("no correspondences".into()));
    }
    let mut sum = Vector3::zeros();
    for &(i, j) in correspondences {
        let (p, q) = match (prev.points.get(i), curr.points.get(j)) {
            (Some(p), Some(q)) => (p, q),
            _ => {
                return Err(Error::Contract(format!(
                    "correspondence ({i}, {j}) out of range"
                )))
            }
        };
        sum += q - p;
    }
    Ok(sum / correspondences.len() as f64)
}

/// Sum of squared residuals `||p_i + t - q_i||^2`.
pub fn alignment_error(
    prev: &PointCloud3D,
    curr: &PointCloud3D,
    correspondences: &[(usize, usize)],
    t: &Vector3<f64>,
) -> f64 {
    correspondences
        .iter()
        .map(|&(i, j)| (prev.points[i] + t - curr.points[j]).norm_squared())
        .sum()
}

/// Camera motion between two frames, with rotation fixed to identity.
///
/// Point coordinates move opposite to the camera, so the returned pose
/// carries the negated point shift projected onto the motion direction.
/// It composes as `P_curr = P_prev * result`.
pub fn estimate_relative_pose(
    prev: &PointCloud3D,
    curr: &PointCloud3D,
    correspondences: &[(usize, usize)],
    cfg: &IcpConfig,
) -> Result<PoseSE3> {
    if correspondences.len() < cfg.min_correspondences {
        return Err(TrackingFailure::TooFewMatches {
            found: correspondences.len(),
            required: cfg.min_correspondences,
        }
        .into());
    }
    let shift = closed_form_translation(prev, curr, correspondences)?;
    let motion = project_onto_direction(&-shift, &cfg.motion_direction);
    let magnitude = motion.norm();
    if magnitude > cfg.max_translation_m {
        return Err(TrackingFailure::TranslationBound {
            magnitude,
            bound: cfg.max_translation_m,
        }
        .into());
    }
    Ok(PoseSE3::from_translation(motion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CoordFrame, Keypoint2D};
    use proptest::prelude::*;

    fn rig() -> CameraRig {
        CameraRig {
            f: 1000.0,
            cx: 2048.0,
            cy: 1500.0,
            baseline_m: 0.11,
            width_px: 4096.0,
            height_px: 3000.0,
        }
    }

    fn m(x: f64, y: f64, u: f64) -> StereoMatch {
        StereoMatch {
            left: Keypoint2D::new(x, y),
            u_right: u,
            cost: 0.0,
        }
    }

    #[test]
    fn principal_point_at_one_meter() {
        let r = rig();
        let p = unproject(&m(r.cx, r.cy, r.cx - 110.0), &r).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        let p = unproject(&m(r.cx, r.cy, r.cx - 55.0), &r).unwrap();
        assert!((p.z - 2.0).abs() < 1e-15);
    }

    #[test]
    fn lateral_offset_by_similar_triangles() {
        let r = rig();
        let p = unproject(&m(r.cx + 0.5 * r.f, r.cy, r.cx + 0.5 * r.f - 110.0), &r).unwrap();
        assert!((p.x - 0.5).abs() < 1e-12);
        assert!((p.z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_disparities() {
        let r = rig();
        assert!(matches!(
            unproject(&m(100.0, 10.0, 100.0), &r),
            Err(Error::DegenerateDisparity { .. })
        ));
        assert!(matches!(
            unproject(&m(100.0, 10.0, 120.0), &r),
            Err(Error::DegenerateDisparity { .. })
        ));
        assert!(matches!(
            unproject(&m(100.0, 10.0, 99.95), &r),
            Err(Error::UnreliableDepth { .. })
        ));
    }

    #[test]
    fn project_point_on_axis() {
        let r = rig();
        let (x, y, u) = project(&Vector3::new(0.0, 0.0, 1.0), &r).unwrap();
        assert_eq!(x, 2048.0);
        assert_eq!(y, r.cy);
        assert!((u - 1938.0).abs() < 1e-12);
        assert!((x - u - 110.0).abs() < 1e-12);
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &r),
            Err(Error::BehindCamera { .. })
        ));
    }

    fn cloud(points: Vec<Vector3<f64>>, idx: u64) -> PointCloud3D {
        PointCloud3D::new(points, CoordFrame::Camera(idx))
    }

    fn sample_points() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.1, 0.2, 1.0),
            Vector3::new(-0.3, 0.0, 1.2),
            Vector3::new(0.25, -0.4, 0.9),
            Vector3::new(0.0, 0.1, 1.05),
        ]
    }

    fn seen_from_moved_camera(points: &[Vector3<f64>], motion: Vector3<f64>) -> Vec<Vector3<f64>> {
        points.iter().map(|p| p - motion).collect()
    }

    #[test]
    fn recovers_pure_motion() {
        let prev = sample_points();
        let curr = seen_from_moved_camera(&prev, Vector3::new(0.08, 0.0, 0.0));
        let pairs: Vec<_> = (0..4).map(|i| (i, i)).collect();
        let pose = estimate_relative_pose(&cloud(prev, 0), &cloud(curr, 1), &pairs, &IcpConfig::default()).unwrap();
        assert!((pose.translation - Vector3::new(0.08, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(pose.rotation, nalgebra::Matrix3::identity());
    }

    #[test]
    fn off_axis_motion_is_projected_away() {
        let prev = sample_points();
        let curr = seen_from_moved_camera(&prev, Vector3::new(0.08, 0.02, 0.0));
        let pairs: Vec<_> = (0..4).map(|i| (i, i)).collect();
        let pose = estimate_relative_pose(&cloud(prev, 0), &cloud(curr, 1), &pairs, &IcpConfig::default()).unwrap();
        assert!((pose.translation - Vector3::new(0.08, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn too_few_correspondences() {
        let prev = sample_points();
        let err = estimate_relative_pose(&cloud(prev.clone(), 0), &cloud(prev, 1), &[(0, 0), (1, 1)], &IcpConfig::default())
            .unwrap_err();
        assert!(matches!(
            err,
            Error::Tracking(TrackingFailure::TooFewMatches { found: 2, required: 3 })
        ));
    }

    #[test]
    fn translation_bound() {
        let prev = sample_points();
        let curr = seen_from_moved_camera(&prev, Vector3::new(0.8, 0.0, 0.0));
        let pairs: Vec<_> = (0..4).map(|i| (i, i)).collect();
        let err = estimate_relative_pose(&cloud(prev, 0), &cloud(curr, 1), &pairs, &IcpConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Tracking(TrackingFailure::TranslationBound { .. })));
    }

    #[test]
    fn invalid_index_is_contract_error() {
        let prev = sample_points();
        let err = closed_form_translation(&cloud(prev.clone(), 0), &cloud(prev, 1), &[(0, 9)]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    proptest! {
        #[test]
        fn projection_roundtrip(x in -1.0..1.0f64, y in -0.7..0.7f64, z in 0.5..5.0f64) {
            let r = rig();
            let p = Vector3::new(x, y, z);
            let (px, py, u) = project(&p, &r).unwrap();
            let back = unproject(&m(px, py, u), &r).unwrap();
            prop_assert!((back - p).amax() < 1e-9);
            let (px2, py2, u2) = project(&back, &r).unwrap();
            prop_assert!((px2 - px).abs() < 1e-6 && (py2 - py).abs() < 1e-6 && (u2 - u).abs() < 1e-6);
        }

        #[test]
        fn closed_form_is_a_strict_minimum(
            pts in prop::collection::vec(prop::array::uniform3(-2.0..2.0f64), 3..20),
            noise in prop::collection::vec(prop::array::uniform3(-0.1..0.1f64), 20),
            dir in prop::array::uniform3(-1.0..1.0f64),
        ) {
            let prev: Vec<_> = pts.iter().map(|p| Vector3::from(*p)).collect();
            let curr: Vec<_> = prev.iter().zip(&noise).map(|(p, n)| p + Vector3::new(0.3, 0.0, 0.1) + Vector3::from(*n)).collect();
            let pairs: Vec<_> = (0..prev.len()).map(|i| (i, i)).collect();
            let (a, b) = (cloud(prev, 0), cloud(curr, 1));
            let t = closed_form_translation(&a, &b, &pairs).unwrap();
            let e0 = alignment_error(&a, &b, &pairs, &t);
            let d = Vector3::from(dir);
            prop_assume!(d.norm() > 1e-3);
            let delta = d.normalize() * 1e-3;
            prop_assert!(alignment_error(&a, &b, &pairs, &(t + delta)) > e0);
        }

        #[test]
        fn projection_is_idempotent(t in prop::array::uniform3(-5.0..5.0f64), dir in prop::array::uniform3(-1.0..1.0f64)) {
            let d = Vector3::from(dir);
            prop_assume!(d.norm() > 1e-3);
            let d = d.normalize();
            let once = project_onto_direction(&Vector3::from(t), &d);
            let twice = project_onto_direction(&once, &d);
            prop_assert!((once - twice).amax() < 1e-12);
        }
    }
}
