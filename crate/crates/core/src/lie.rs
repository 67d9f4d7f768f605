//! SO(3)/SE(3) helpers used by the pose type and the optimizer.
//!
//! Tangent vectors for SE(3) are ordered `[rho, theta]`: translation part
//! first, rotation part second. Perturbations are applied on the right,
//! `T * Exp(xi)`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};

const SMALL_ANGLE: f64 = 1e-10;

/// Skew-symmetric cross-product matrix, `skew(a) * b == a.cross(b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(theta: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*theta).into_inner()
}

pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    // Through the quaternion: stays finite when the trace rounds past 3.
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (w, v) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let n = v.norm();
    if n < 1e-12 {
        return v * (2.0 / w);
    }
    v * (2.0 * n.atan2(w) / n)
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let k = skew(theta);
    if angle < 1e-6 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let coeff = 1.0 / (angle * angle) - (1.0 + angle.cos()) / (2.0 * angle * angle.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// SE(3) exponential: returns `(R, t)` for the tangent `[rho, theta]`.
pub fn se3_exp(xi: &Vector6<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let theta = Vector3::new(xi[3], xi[4], xi[5]);
    let angle = theta.norm();
    let k = skew(&theta);
    let v = if angle < SMALL_ANGLE {
        Matrix3::identity() + 0.5 * k
    } else {
        let a2 = angle * angle;
        Matrix3::identity()
            + ((1.0 - angle.cos()) / a2) * k
            + ((angle - angle.sin()) / (a2 * angle)) * k * k
    };
    (so3_exp(&theta), v * rho)
}

/// Projects a nearly-orthonormal matrix back onto SO(3).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * vt;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_log_roundtrip() {
        let w = Vector3::new(0.3, -0.2, 0.9);
        let r = so3_exp(&w);
        assert!((so3_log(&r) - w).norm() < 1e-12);
    }

    #[test]
    fn right_jacobian_inverse_matches_finite_difference() {
        // Log(Exp(w) Exp(d)) ≈ w + Jr^{-1}(w) d
        let w = Vector3::new(0.4, 0.1, -0.7);
        let jinv = so3_right_jacobian_inv(&w);
        let h = 1e-6;
        for i in 0..3 {
            let mut d = Vector3::zeros();
            d[i] = h;
            let plus = so3_log(&(so3_exp(&w) * so3_exp(&d)));
            let minus = so3_log(&(so3_exp(&w) * so3_exp(&-d)));
            let col = (plus - minus) / (2.0 * h);
            assert!((col - jinv.column(i)).norm() < 1e-8);
        }
    }

    #[test]
    fn se3_exp_pure_translation() {
        let xi = Vector6::new(0.1, 0.2, 0.3, 0.0, 0.0, 0.0);
        let (r, t) = se3_exp(&xi);
        assert_eq!(r, Matrix3::identity());
        assert!((t - Vector3::new(0.1, 0.2, 0.3)).norm() < 1e-15);
    }
}
