#![allow(dead_code)]

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use seedslam::backend::{FactorGraphProblem, StereoMeasurement};
use seedslam::geometry::project;
use seedslam::{CameraRig, PoseSE3};

pub fn rig() -> CameraRig {
    CameraRig::default()
}

/// Straight-line trajectory and landmarks spread in front of it.
pub struct Scene {
    pub poses: Vec<PoseSE3>,
    pub landmarks: Vec<Vector3<f64>>,
}

pub fn scene(n_poses: usize, n_landmarks: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 0.08;
    let poses = (0..n_poses)
        .map(|k| PoseSE3::from_translation(Vector3::new(k as f64 * step, 0.0, 0.0)))
        .collect();
    let end = (n_poses - 1) as f64 * step;
    let landmarks = (0..n_landmarks)
        .map(|_| {
            Vector3::new(
                rng.random_range(-0.2..end + 0.2),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.9..1.1),
            )
        })
        .collect();
    Scene { poses, landmarks }
}

/// Stereo measurement of a world point, with optional pixel noise.
pub fn measure(pose: &PoseSE3, p: &Vector3<f64>, noise: Option<(&mut ChaCha8Rng, f64)>) -> Option<StereoMeasurement> {
    let r = rig();
    let (mut x, mut y, mut u) = project(&pose.inverse_transform_point(p), &r).ok()?;
    if !(r.contains(x, y) && r.contains(u, y)) {
        return None;
    }
    if let Some((rng, sigma)) = noise {
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).unwrap();
            x += n.sample(rng);
            u += n.sample(rng);
            y += n.sample(rng);
        }
    }
    Some(StereoMeasurement { x, u_right: u, y })
}

/// Graph over the scene with every landmark seen by at least two poses.
/// Poses after the first and all landmarks are perturbed by `init_error`.
pub fn graph_for(s: &Scene, pixel_noise: f64, init_error: f64, seed: u64) -> FactorGraphProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut g = FactorGraphProblem::new(rig(), Vector3::x());
    for (k, p) in s.poses.iter().enumerate() {
        let init = if k == 0 {
            *p
        } else {
            let xi = Vector6::from_fn(|i, _| {
                let scale = if i < 3 { init_error } else { init_error * 0.1 };
                rng.random_range(-scale..=scale)
            });
            p.retract(&xi)
        };
        g.add_pose(init);
    }
    for k in 1..s.poses.len() {
        let rel = s.poses[k - 1].inverse().compose(&s.poses[k]);
        g.add_motion_factor(k - 1, k, rel).unwrap();
    }
    // Landmark id = index into the scene.
    for (id, p) in s.landmarks.iter().enumerate() {
        let id = id as u64;
        let obs: Vec<_> = s
            .poses
            .iter()
            .enumerate()
            .filter_map(|(k, pose)| measure(pose, p, Some((&mut rng, pixel_noise))).map(|m| (k, m)))
            .collect();
        if obs.len() < 2 {
            continue;
        }
        let init = p + Vector3::from_fn(|_, _| rng.random_range(-init_error..=init_error));
        g.add_landmark(id, init).unwrap();
        for (k, m) in obs {
            g.add_stereo_factor(k, id, m).unwrap();
        }
    }
    g
}
