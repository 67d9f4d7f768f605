//! JSON-Lines detection sequences: one stereo frame per line.
//!
//! ```text
//! {"frame":0,"t":0.0,"left":[{"x":10.5,"y":20.25,"id":3}],"right":[{"x":1.0,"y":2.0,"id":null}]}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{CameraRig, DetectionFrame, Keypoint2D};

/// Keypoints closer than this in one image are treated as the same detection.
pub const DUPLICATE_RADIUS_PX: f64 = 1.0;

/// Reads and validates a detection sequence against the rig's image bounds.
pub fn load_detection_sequence(path: &Path, rig: &CameraRig) -> Result<Vec<DetectionFrame>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: DetectionFrame = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        frames.push(frame);
    }
    validate_sequence(frames, rig)
}

/// Sorts, checks bounds and frame-index uniqueness, and drops exact duplicates.
pub fn validate_sequence(
    mut frames: Vec<DetectionFrame>,
    rig: &CameraRig,
) -> Result<Vec<DetectionFrame>> {
    frames.sort_by_key(|f| f.frame_index);
    for pair in frames.windows(2) {
        if pair[0].frame_index == pair[1].frame_index {
            return Err(Error::Validation(format!(
                "duplicate frame index {}",
                pair[0].frame_index
            )));
        }
    }
    for frame in &mut frames {
        if !frame.timestamp.is_finite() {
            return Err(Error::Validation(format!(
                "frame {}: non-finite timestamp",
                frame.frame_index
            )));
        }
        for (side, points) in [("left", &mut frame.left), ("right", &mut frame.right)] {
            for (k, p) in points.iter().enumerate() {
                if !rig.contains(p.x, p.y) {
                    return Err(Error::Validation(format!(
                        "frame {}: {side} keypoint {k} at ({}, {}) outside image bounds",
                        frame.frame_index, p.x, p.y
                    )));
                }
            }
            let before = points.len();
            dedup_keypoints(points);
            if points.len() != before {
                log::warn!(
                    "frame {}: dropped {} duplicate {side} keypoints",
                    frame.frame_index,
                    before - points.len()
                );
            }
        }
    }
    Ok(frames)
}

pub(crate) fn dedup_keypoints(points: &mut Vec<Keypoint2D>) {
    let mut kept: Vec<Keypoint2D> = Vec::with_capacity(points.len());
    for p in points.drain(..) {
        if kept.iter().all(|q| q.dist(&p) >= DUPLICATE_RADIUS_PX) {
            kept.push(p);
        }
    }
    *points = kept;
}

/// Canonical text form of one frame (no trailing newline).
pub fn frame_to_line(frame: &DetectionFrame) -> String {
    serde_json::to_string(frame).expect("detection frames always serialize")
}

pub fn write_detection_sequence(path: &Path, frames: &[DetectionFrame]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for frame in frames {
        writeln!(out, "{}", frame_to_line(frame)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
