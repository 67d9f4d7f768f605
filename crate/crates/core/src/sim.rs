//! Synthetic row-crop scenes: panicles of seeds along a row, a side-viewing
//! stereo rig driving past at constant speed, and corrupted per-frame
//! detections with ground-truth labels.
//!
//! Camera axes: x right (along the row), y down, z forward (into the row).
//! The world frame is the first camera pose.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detections::dedup_keypoints;
use crate::error::{Error, Result};
use crate::geometry;
use crate::types::{CameraRig, DetectionFrame, Keypoint2D, PoseSE3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub range_length_m: f64,
    pub n_panicles: usize,
    pub seeds_per_panicle: usize,
    pub panicle_spread_m: f64,
    pub camera_speed_mps: f64,
    pub frame_rate_hz: f64,
    pub rig: CameraRig,
    pub pixel_noise_sigma_px: f64,
    pub false_negative_rate: f64,
    pub false_positive_rate_per_frame: f64,
    pub rng_seed: u64,
    /// Nominal distance from the camera path to the row.
    pub standoff_m: f64,
    /// Panicle centers vary in depth by up to this much either way.
    pub depth_jitter_m: f64,
    /// Panicle centers lie within this distance above/below the optical axis.
    pub row_half_height_m: f64,
    pub min_seed_spacing_m: f64,
    pub min_depth_m: f64,
    pub max_depth_m: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            range_length_m: 4.0,
            n_panicles: 24,
            seeds_per_panicle: 25,
            panicle_spread_m: 0.04,
            camera_speed_mps: 0.4,
            frame_rate_hz: 5.0,
            rig: CameraRig::default(),
            pixel_noise_sigma_px: 0.5,
            false_negative_rate: 0.1,
            false_positive_rate_per_frame: 5.0,
            rng_seed: 0,
            standoff_m: 1.0,
            depth_jitter_m: 0.05,
            row_half_height_m: 0.35,
            min_seed_spacing_m: 0.004,
            min_depth_m: 0.3,
            max_depth_m: 3.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        let nonneg = [
            self.panicle_spread_m,
            self.pixel_noise_sigma_px,
            self.false_positive_rate_per_frame,
            self.depth_jitter_m,
            self.row_half_height_m,
            self.min_seed_spacing_m,
            self.range_length_m,
        ];
        if !nonneg.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return Err(Error::Validation("sim lengths, rates and sigmas must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.false_negative_rate) && self.false_negative_rate != 1.0 {
            return Err(Error::Validation("false_negative_rate must lie in [0, 1]".into()));
        }
        if !(self.frame_rate_hz > 0.0) || !(self.camera_speed_mps > 0.0) {
            return Err(Error::Validation("frame_rate_hz and camera_speed_mps must be positive".into()));
        }
        if !(self.min_depth_m > 0.0 && self.max_depth_m > self.min_depth_m) {
            return Err(Error::Validation("need 0 < min_depth_m < max_depth_m".into()));
        }
        Ok(())
    }

    /// Parses and validates a JSON document; omitted fields take defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = crate::config::parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Distance travelled between consecutive frames.
    pub fn step_m(&self) -> f64 {
        self.camera_speed_mps / self.frame_rate_hz
    }

    pub fn n_frames(&self) -> usize {
        (self.range_length_m / self.step_m() + 1e-9).floor() as usize + 1
    }

    /// Half the horizontal field of view at the stand-off depth, in meters.
    fn half_view_m(&self) -> f64 {
        0.5 * self.rig.width_px / self.rig.f * self.standoff_m
    }

    /// Axis-aligned box containing every generated seed.
    pub fn row_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let m = self.half_view_m();
        let s = self.panicle_spread_m;
        (
            Vector3::new(-m - s, -self.row_half_height_m - s, self.standoff_m - self.depth_jitter_m - s / 2.0),
            Vector3::new(
                self.range_length_m + m + s,
                self.row_half_height_m + s,
                self.standoff_m + self.depth_jitter_m + s / 2.0,
            ),
        )
    }
}

/// Correspondence labels for one rendered frame, as index pairs into the
/// detection lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub frame: u64,
    /// Landmarks visible in both images before corruption.
    pub visible: Vec<u64>,
    /// `(left index, right index)` within this frame.
    pub stereo: Vec<(usize, usize)>,
    /// `(left index in previous frame, left index in this frame)`.
    pub temporal: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SimConfig,
    pub landmark_positions: BTreeMap<u64, Vector3<f64>>,
    pub poses: Vec<PoseSE3>,
    #[serde(default)]
    pub frames: Vec<FrameLabels>,
}

impl GroundTruth {
    /// Arc length of the true trajectory from frame 0 to `frame` (clamped).
    pub fn arc_length_to(&self, frame: usize) -> f64 {
        let end = frame.min(self.poses.len().saturating_sub(1));
        self.poses[..=end]
            .windows(2)
            .map(|w| (w[1].translation - w[0].translation).norm())
            .sum()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        serde_json::to_writer(&mut out, self).map_err(|e| Error::io(path, e.into()))?;
        out.flush().map_err(io)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// SplitMix64 finalizer; decorrelates per-frame streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ frame as u64))
}

/// Uniform sample inside an axis-aligned ellipsoid.
fn sample_ellipsoid(rng: &mut ChaCha8Rng, axes: &Vector3<f64>) -> Vector3<f64> {
    loop {
        let p = Vector3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        if p.norm_squared() <= 1.0 {
            return p.component_mul(axes);
        }
    }
}

/// Places panicles along the row and camera poses along the path.
pub fn generate_scene(cfg: &SimConfig) -> GroundTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.rng_seed));
    let margin = cfg.half_view_m();
    let span = cfg.range_length_m + 2.0 * margin;
    let pitch = span / cfg.n_panicles.max(1) as f64;
    let axes = Vector3::new(cfg.panicle_spread_m, cfg.panicle_spread_m, cfg.panicle_spread_m / 2.0);
    let spacing2 = cfg.min_seed_spacing_m * cfg.min_seed_spacing_m;

    let mut landmark_positions = BTreeMap::new();
    let mut next_id = 0u64;
    for k in 0..cfg.n_panicles {
        let center = Vector3::new(
            -margin + (k as f64 + 0.5) * pitch + rng.random_range(-0.3..=0.3) * pitch,
            rng.random_range(-cfg.row_half_height_m..=cfg.row_half_height_m),
            cfg.standoff_m + rng.random_range(-cfg.depth_jitter_m..=cfg.depth_jitter_m),
        );
        let mut seeds: Vec<Vector3<f64>> = Vec::with_capacity(cfg.seeds_per_panicle);
        let mut attempts = 0usize;
        while seeds.len() < cfg.seeds_per_panicle && attempts < 10_000 * cfg.seeds_per_panicle {
            attempts += 1;
            let p = center + sample_ellipsoid(&mut rng, &axes);
            if seeds.iter().all(|q| (q - p).norm_squared() >= spacing2) {
                seeds.push(p);
            }
        }
        if seeds.len() < cfg.seeds_per_panicle {
            log::warn!("panicle {k}: placed {} of {} seeds", seeds.len(), cfg.seeds_per_panicle);
        }
        for p in seeds {
            landmark_positions.insert(next_id, p);
            next_id += 1;
        }
    }

    let step = cfg.step_m();
    let poses = (0..cfg.n_frames())
        .map(|k| PoseSE3::from_translation(Vector3::new(k as f64 * step, 0.0, 0.0)))
        .collect();
    GroundTruth {
        config: *cfg,
        landmark_positions,
        poses,
        frames: Vec::new(),
    }
}

/// Exact left `(x, y)` and right `(u, y)` projections of every landmark
/// visible in both images at `frame`.
pub fn visible_projections(gt: &GroundTruth, frame: usize, cfg: &SimConfig) -> Vec<(u64, f64, f64, f64)> {
    let pose = &gt.poses[frame];
    let rig = &cfg.rig;
    gt.landmark_positions
        .iter()
        .filter_map(|(id, p)| {
            let pc = pose.inverse_transform_point(p);
            if pc.z < cfg.min_depth_m || pc.z > cfg.max_depth_m {
                return None;
            }
            let (x, y, u) = geometry::project(&pc, rig).ok()?;
            (rig.contains(x, y) && rig.contains(u, y)).then_some((*id, x, y, u))
        })
        .collect()
}

/// Renders one corrupted stereo frame. Ids are kept on true detections.
pub fn render_frame(gt: &GroundTruth, frame: usize, cfg: &SimConfig) -> DetectionFrame {
    let mut rng = frame_rng(cfg.rng_seed, frame);
    let rig = &cfg.rig;
    let noise = Normal::new(0.0, cfg.pixel_noise_sigma_px).expect("sigma validated");
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (id, x, y, u) in visible_projections(gt, frame, cfg) {
        let (lx, ly) = (x + noise.sample(&mut rng), y + noise.sample(&mut rng));
        let (rx, ry) = (u + noise.sample(&mut rng), y + noise.sample(&mut rng));
        let keep_left = rng.random::<f64>() >= cfg.false_negative_rate;
        let keep_right = rng.random::<f64>() >= cfg.false_negative_rate;
        if keep_left && rig.contains(lx, ly) {
            left.push(Keypoint2D::with_id(lx, ly, id));
        }
        if keep_right && rig.contains(rx, ry) {
            right.push(Keypoint2D::with_id(rx, ry, id));
        }
    }
    if cfg.false_positive_rate_per_frame > 0.0 {
        let poisson = Poisson::new(cfg.false_positive_rate_per_frame).expect("rate validated");
        for side in [&mut left, &mut right] {
            let n = poisson.sample(&mut rng) as usize;
            for _ in 0..n {
                side.push(Keypoint2D::new(
                    rng.random_range(0.0..rig.width_px),
                    rng.random_range(0.0..rig.height_px),
                ));
            }
        }
    }
    left.shuffle(&mut rng);
    right.shuffle(&mut rng);
    dedup_keypoints(&mut left);
    dedup_keypoints(&mut right);
    DetectionFrame {
        frame_index: frame as u64,
        timestamp: frame as f64 / cfg.frame_rate_hz,
        left,
        right,
    }
}

fn id_index(points: &[Keypoint2D]) -> HashMap<u64, usize> {
    points
        .iter()
        .enumerate()
        .filter_map(|(k, p)| p.id.map(|id| (id, k)))
        .collect()
}

/// Ground-truth correspondences of `cur` (and against `prev` if given).
pub fn frame_labels(
    gt: &GroundTruth,
    prev: Option<&DetectionFrame>,
    cur: &DetectionFrame,
    cfg: &SimConfig,
) -> FrameLabels {
    let right = id_index(&cur.right);
    let mut stereo: Vec<(usize, usize)> = cur
        .left
        .iter()
        .enumerate()
        .filter_map(|(k, p)| p.id.and_then(|id| right.get(&id)).map(|&j| (k, j)))
        .collect();
    stereo.sort_unstable();
    let mut temporal = Vec::new();
    if let Some(prev) = prev {
        let now = id_index(&cur.left);
        temporal = prev
            .left
            .iter()
            .enumerate()
            .filter_map(|(k, p)| p.id.and_then(|id| now.get(&id)).map(|&j| (k, j)))
            .collect();
        temporal.sort_unstable();
    }
    FrameLabels {
        frame: cur.frame_index,
        visible: visible_projections(gt, cur.frame_index as usize, cfg)
            .into_iter()
            .map(|v| v.0)
            .collect(),
        stereo,
        temporal,
    }
}

/// Generates a scene and renders every frame; labels are filled in.
pub fn simulate(cfg: &SimConfig) -> Result<(Vec<DetectionFrame>, GroundTruth)> {
    cfg.validate()?;
    let mut gt = generate_scene(cfg);
    let frames: Vec<DetectionFrame> = (0..gt.poses.len())
        .into_par_iter()
        .map(|k| render_frame(&gt, k, cfg))
        .collect();
    gt.frames = frames
        .iter()
        .enumerate()
        .map(|(k, f)| frame_labels(&gt, k.checked_sub(1).map(|p| &frames[p]), f, cfg))
        .collect();
    Ok((frames, gt))
}
