//! Shared domain types.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie;

/// A detected object center in one image, in (subpixel) pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint2D {
    pub x: f64,
    pub y: f64,
    /// Ground-truth landmark id; present only for simulated detections.
    #[serde(default)]
    pub id: Option<u64>,
}

impl Keypoint2D {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, id: None }
    }

    pub fn with_id(x: f64, y: f64, id: u64) -> Self {
        Self { x, y, id: Some(id) }
    }

    pub fn dist(&self, other: &Keypoint2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Detections from one synchronized stereo pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    #[serde(rename = "frame")]
    pub frame_index: u64,
    #[serde(rename = "t")]
    pub timestamp: f64,
    pub left: Vec<Keypoint2D>,
    pub right: Vec<Keypoint2D>,
}

/// Rectified stereo pinhole rig. Both cameras share intrinsics; the right
/// camera sits `baseline_m` along the left camera's +x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline_m: f64,
    pub width_px: f64,
    pub height_px: f64,
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.f > 0.0
            && self.baseline_m > 0.0
            && self.cx > 0.0
            && self.cx < self.width_px
            && self.cy > 0.0
            && self.cy < self.height_px;
        if ok && [self.f, self.cx, self.cy, self.baseline_m].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid camera rig {self:?}")))
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width_px && y < self.height_px
    }
}

impl Default for CameraRig {
    /// 4096 x 3000 sensor, 0.11 m baseline.
    fn default() -> Self {
        Self {
            f: 3000.0,
            cx: 2048.0,
            cy: 1500.0,
            baseline_m: 0.11,
            width_px: 4096.0,
            height_px: 3000.0,
        }
    }
}

/// A left keypoint paired with the x coordinate of its right-image match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoMatch {
    pub left: Keypoint2D,
    pub u_right: f64,
    pub cost: f64,
}

impl StereoMatch {
    pub fn disparity(&self) -> f64 {
        self.left.x - self.u_right
    }
}

/// Rigid transform. Camera poses are camera-to-world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        let det = self.rotation.determinant();
        if err > 1e-9 || (det - 1.0).abs() > 1e-9 || !self.translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::Validation(format!(
                "not a rigid transform (orthonormality error {err:e}, det {det})"
            )));
        }
        Ok(())
    }

    /// `self * other`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: lie::orthonormalize(&(self.rotation * other.rotation)),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Inverse transform of a point: world to camera for a camera pose.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Right perturbation `self * Exp(xi)` with `xi = [rho, theta]`.
    pub fn retract(&self, xi: &nalgebra::Vector6<f64>) -> PoseSE3 {
        let (dr, dt) = lie::se3_exp(xi);
        PoseSE3 {
            rotation: lie::orthonormalize(&(self.rotation * dr)),
            translation: self.translation + self.rotation * dt,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }
}

/// Free-function form of [`PoseSE3::compose`].
pub fn compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    a.compose(b)
}

/// Optimized camera poses keyed by frame index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryEstimate {
    pub frames: Vec<u64>,
    pub poses: Vec<PoseSE3>,
}

impl TrajectoryEstimate {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn pose_of(&self, frame: u64) -> Option<&PoseSE3> {
        self.frames.iter().position(|f| *f == frame).map(|k| &self.poses[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordFrame {
    /// Camera frame at the given frame index.
    Camera(u64),
    World,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud3D {
    pub points: Vec<Vector3<f64>>,
    pub frame: CoordFrame,
}

impl PointCloud3D {
    pub fn new(points: Vec<Vector3<f64>>, frame: CoordFrame) -> Self {
        Self { points, frame }
    }

    pub fn world(points: Vec<Vector3<f64>>) -> Self {
        Self::new(points, CoordFrame::World)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!("point {i} is not finite")));
            }
            if matches!(self.frame, CoordFrame::Camera(_)) && p.z <= 0.0 {
                return Err(Error::Validation(format!(
                    "camera-frame point {i} has z = {} <= 0",
                    p.z
                )));
            }
        }
        Ok(())
    }
}
