//! Residuals and analytic Jacobians.
//!
//! Pose Jacobians are taken with respect to the right perturbation
//! `T * Exp([rho, theta])` used by [`PoseSE3::retract`].

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};

use crate::error::Result;
use crate::geometry;
use crate::lie::{skew, so3_log, so3_right_jacobian_inv};
use crate::types::{CameraRig, PoseSE3};

/// Stereo measurement, ordered `(x, u_right, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoMeasurement {
    pub x: f64,
    pub u_right: f64,
    pub y: f64,
}

impl StereoMeasurement {
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.u_right, self.y)
    }
}

/// Predicted minus measured stereo coordinates, in pixels.
pub fn stereo_residual(
    pose: &PoseSE3,
    landmark: &Vector3<f64>,
    measured: &StereoMeasurement,
    rig: &CameraRig,
) -> Result<Vector3<f64>> {
    let pc = pose.inverse_transform_point(landmark);
    let (x, y, u) = geometry::project(&pc, rig)?;
    Ok(Vector3::new(x, u, y) - measured.as_vector())
}

pub struct StereoLinearization {
    pub residual: Vector3<f64>,
    pub d_pose: Matrix3x6<f64>,
    pub d_landmark: Matrix3<f64>,
}

/// Residual and Jacobians, or `None` when the point is not in front of the camera.
pub fn stereo_linearize(
    pose: &PoseSE3,
    landmark: &Vector3<f64>,
    measured: &StereoMeasurement,
    rig: &CameraRig,
) -> Option<StereoLinearization> {
    let pc = pose.inverse_transform_point(landmark);
    let (x, y, u) = geometry::project(&pc, rig).ok()?;
    let residual = Vector3::new(x, u, y) - measured.as_vector();

    let (f, b) = (rig.f, rig.baseline_m);
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    let d_proj = Matrix3::new(
        f * iz, 0.0, -f * pc.x * iz2,
        f * iz, 0.0, -f * (pc.x - b) * iz2,
        0.0, f * iz, -f * pc.y * iz2,
    );
    let mut d_pc_pose = Matrix3x6::zeros();
    d_pc_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&-Matrix3::identity());
    d_pc_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&pc));
    Some(StereoLinearization {
        residual,
        d_pose: d_proj * d_pc_pose,
        d_landmark: d_proj * pose.rotation.transpose(),
    })
}

/// Relative-motion error between consecutive poses, `[translation; rotation]`,
/// expressed in the frame of the earlier pose.
pub fn motion_residual(from: &PoseSE3, to: &PoseSE3, measured: &PoseSE3) -> Vector6<f64> {
    let rel_t = from.rotation.transpose() * (to.translation - from.translation);
    let rel_r = from.rotation.transpose() * to.rotation;
    let e_t = rel_t - measured.translation;
    let e_r = so3_log(&(measured.rotation.transpose() * rel_r));
    Vector6::new(e_t.x, e_t.y, e_t.z, e_r.x, e_r.y, e_r.z)
}

pub struct MotionLinearization {
    pub residual: Vector6<f64>,
    pub d_from: Matrix6<f64>,
    pub d_to: Matrix6<f64>,
}

pub fn motion_linearize(from: &PoseSE3, to: &PoseSE3, measured: &PoseSE3) -> MotionLinearization {
    let residual = motion_residual(from, to, measured);
    let rel_t = from.rotation.transpose() * (to.translation - from.translation);
    let rel_r = from.rotation.transpose() * to.rotation;
    let e_r = Vector3::new(residual[3], residual[4], residual[5]);
    let jr_inv = so3_right_jacobian_inv(&e_r);

    let mut d_from = Matrix6::zeros();
    d_from.fixed_view_mut::<3, 3>(0, 0).copy_from(&-Matrix3::identity());
    d_from.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&rel_t));
    d_from
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(-jr_inv * rel_r.transpose()));

    let mut d_to = Matrix6::zeros();
    d_to.fixed_view_mut::<3, 3>(0, 0).copy_from(&rel_r);
    d_to.fixed_view_mut::<3, 3>(3, 3).copy_from(&jr_inv);

    MotionLinearization {
        residual,
        d_from,
        d_to,
    }
}

/// Square-root information of the motion prior: tight on rotation and on
/// translation across the motion axis, loose along it.
pub fn motion_sqrt_information(
    direction: &Vector3<f64>,
    sigma_rot: f64,
    sigma_along: f64,
    sigma_perp: f64,
) -> Matrix6<f64> {
    let along = direction * direction.transpose();
    let perp = Matrix3::identity() - along;
    let mut w = Matrix6::zeros();
    w.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(along / sigma_along + perp / sigma_perp));
    w.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() / sigma_rot));
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Keypoint2D;
    use crate::types::StereoMatch;

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

    #[test]
    fn consistent_landmark_has_zero_residual() {
        let r = rig();
        let pose = PoseSE3::identity().retract(&Vector6::new(0.2, -0.1, 0.05, 0.02, -0.03, 0.01));
        let m = StereoMatch {
            left: Keypoint2D::new(2300.0, 1400.0),
            u_right: 2150.0,
            cost: 0.0,
        };
        let pc = geometry::unproject(&m, &r).unwrap();
        let world = pose.transform_point(&pc);
        let meas = StereoMeasurement {
            x: 2300.0,
            u_right: 2150.0,
            y: 1400.0,
        };
        let res = stereo_residual(&pose, &world, &meas, &r).unwrap();
        assert!(res.amax() < 1e-9, "{res}");
    }

    #[test]
    fn lateral_displacement_shifts_both_columns() {
        let r = rig();
        let pose = PoseSE3::identity();
        let meas = {
            let (x, y, u) = geometry::project(&Vector3::new(0.0, 0.0, 1.0), &r).unwrap();
            StereoMeasurement { x, u_right: u, y }
        };
        let res = stereo_residual(&pose, &Vector3::new(0.01, 0.0, 1.0), &meas, &r).unwrap();
        assert!((res - Vector3::new(10.0, 10.0, 0.0)).amax() < 1e-9, "{res}");
    }

    #[test]
    fn behind_camera_is_an_error() {
        let meas = StereoMeasurement {
            x: 0.0,
            u_right: 0.0,
            y: 0.0,
        };
        assert!(stereo_residual(&PoseSE3::identity(), &Vector3::new(0.0, 0.0, -1.0), &meas, &rig()).is_err());
        assert!(stereo_linearize(&PoseSE3::identity(), &Vector3::new(0.0, 0.0, -1.0), &meas, &rig()).is_none());
    }

    #[test]
    fn motion_residual_vanishes_on_exact_measurement() {
        let a = PoseSE3::identity().retract(&Vector6::new(0.1, 0.2, 0.3, 0.1, 0.0, -0.2));
        let rel = PoseSE3::identity().retract(&Vector6::new(0.08, 0.0, 0.01, 0.01, 0.02, 0.0));
        let b = a.compose(&rel);
        let e = motion_residual(&a, &b, &rel);
        assert!(e.amax() < 1e-12, "{e}");
    }

    #[test]
    fn sqrt_information_is_anisotropic() {
        let w = motion_sqrt_information(&Vector3::x(), 0.01, 0.2, 0.01);
        let e = Vector6::new(0.2, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(((w * e).norm() - 1.0).abs() < 1e-12);
        let e = Vector6::new(0.0, 0.01, 0.0, 0.0, 0.0, 0.0);
        assert!(((w * e).norm() - 1.0).abs() < 1e-12);
    }

    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-6;

    fn random_pose(rng: &mut ChaCha8Rng, scale: f64) -> PoseSE3 {
        let xi = Vector6::from_fn(|_, _| rng.random_range(-scale..scale));
        PoseSE3::identity().retract(&xi)
    }

    fn rel_err(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
        (analytic - fd).norm() / fd.norm().max(1.0)
    }

    /// Central differences of `f` over a perturbation of dimension `n`.
    fn central_diff<F: Fn(&DMatrix<f64>) -> DMatrix<f64>>(n: usize, m: usize, f: F) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(m, n);
        for k in 0..n {
            let mut d = DMatrix::zeros(n, 1);
            d[k] = STEP;
            let col = (f(&d) - f(&-d)) / (2.0 * STEP);
            j.column_mut(k).copy_from(&col.column(0));
        }
        j
    }

    #[test]
    fn stereo_jacobians_match_finite_differences() {
        let r = rig();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let pose = random_pose(&mut rng, 0.3);
            let pc = Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.6..1.5),
            );
            let landmark = pose.transform_point(&pc);
            let meas = StereoMeasurement {
                x: rng.random_range(0.0..4096.0),
                u_right: rng.random_range(0.0..4096.0),
                y: rng.random_range(0.0..3000.0),
            };
            let lin = stereo_linearize(&pose, &landmark, &meas, &r).unwrap();
            let res = |p: &PoseSE3, l: &Vector3<f64>| {
                DMatrix::from_column_slice(3, 1, stereo_residual(p, l, &meas, &r).unwrap().as_slice())
            };
            let fd_pose = central_diff(6, 3, |d| {
                let xi = Vector6::from_column_slice(d.as_slice());
                res(&pose.retract(&xi), &landmark)
            });
            let fd_land = central_diff(3, 3, |d| res(&pose, &(landmark + Vector3::from_column_slice(d.as_slice()))));
            let a_pose = DMatrix::from_column_slice(3, 6, lin.d_pose.as_slice());
            let a_land = DMatrix::from_column_slice(3, 3, lin.d_landmark.as_slice());
            assert!(rel_err(&a_pose, &fd_pose) < 1e-5, "pose {}", rel_err(&a_pose, &fd_pose));
            assert!(rel_err(&a_land, &fd_land) < 1e-5, "landmark {}", rel_err(&a_land, &fd_land));
        }
    }

    #[test]
    fn motion_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let from = random_pose(&mut rng, 0.5);
            let to = random_pose(&mut rng, 0.5);
            let measured = random_pose(&mut rng, 0.3);
            let lin = motion_linearize(&from, &to, &measured);
            let res = |a: &PoseSE3, b: &PoseSE3| {
                DMatrix::from_column_slice(6, 1, motion_residual(a, b, &measured).as_slice())
            };
            let fd_from = central_diff(6, 6, |d| res(&from.retract(&Vector6::from_column_slice(d.as_slice())), &to));
            let fd_to = central_diff(6, 6, |d| res(&from, &to.retract(&Vector6::from_column_slice(d.as_slice()))));
            let a_from = DMatrix::from_column_slice(6, 6, lin.d_from.as_slice());
            let a_to = DMatrix::from_column_slice(6, 6, lin.d_to.as_slice());
            assert!(rel_err(&a_from, &fd_from) < 1e-5, "from {}", rel_err(&a_from, &fd_from));
            assert!(rel_err(&a_to, &fd_to) < 1e-5, "to {}", rel_err(&a_to, &fd_to));
        }
    }
}
