use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::types::{PoseSE3, TrajectoryEstimate};

/// One row of the landmark export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkRow {
    pub id: u64,
    pub position: Vector3<f64>,
    pub n_observations: usize,
}

pub fn write_trajectory_csv(path: &Path, trajectory: &TrajectoryEstimate) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "frame,tx,ty,tz,qx,qy,qz,qw").map_err(io)?;
    for (frame, pose) in trajectory.frames.iter().zip(&trajectory.poses) {
        let t = pose.translation;
        let q = pose.quaternion();
        writeln!(
            out,
            "{frame},{},{},{},{},{},{},{}",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn write_landmark_csv(path: &Path, rows: &[LandmarkRow]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "id,x,y,z,n_observations").map_err(io)?;
    for r in rows {
        let p = r.position;
        writeln!(out, "{},{},{},{},{}", r.id, p.x, p.y, p.z, r.n_observations).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Numeric rows of a CSV with the given header, parsed as `f64`.
fn read_rows(path: &Path, header: &str) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{header}`"),
        });
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |message: String| Error::Parse { line: i + 2, message };
            let row = l
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != width {
                return Err(bad(format!("expected {width} fields, got {}", row.len())));
            }
            Ok(row)
        })
        .collect()
}

pub fn read_trajectory_csv(path: &Path) -> Result<TrajectoryEstimate> {
    let mut out = TrajectoryEstimate::default();
    for r in read_rows(path, "frame,tx,ty,tz,qx,qy,qz,qw")? {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(r[7], r[4], r[5], r[6]));
        out.frames.push(r[0] as u64);
        out.poses.push(PoseSE3 {
            rotation: *q.to_rotation_matrix().matrix(),
            translation: Vector3::new(r[1], r[2], r[3]),
        });
    }
    Ok(out)
}

pub fn read_landmark_csv(path: &Path) -> Result<Vec<LandmarkRow>> {
    Ok(read_rows(path, "id,x,y,z,n_observations")?
        .into_iter()
        .map(|r| LandmarkRow {
            id: r[0] as u64,
            position: Vector3::new(r[1], r[2], r[3]),
            n_observations: r[4] as usize,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PoseSE3;

    #[test]
    fn trajectory_csv_layout() {
        let traj = TrajectoryEstimate {
            frames: vec![0, 1],
            poses: vec![
                PoseSE3::identity(),
                PoseSE3::from_translation(Vector3::new(0.08, 0.0, 0.0)),
            ],
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_trajectory_csv(f.path(), &traj).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert_eq!(
            text,
            "frame,tx,ty,tz,qx,qy,qz,qw\n0,0,0,0,0,0,0,1\n1,0.08,0,0,0,0,0,1\n"
        );
    }

    #[test]
    fn landmark_csv_layout() {
        let rows = [LandmarkRow {
            id: 4,
            position: Vector3::new(0.5, -0.25, 1.0),
            n_observations: 3,
        }];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_landmark_csv(f.path(), &rows).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert_eq!(text, "id,x,y,z,n_observations\n4,0.5,-0.25,1,3\n");
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let traj = TrajectoryEstimate {
            frames: vec![0, 3],
            poses: vec![
                PoseSE3::identity(),
                PoseSE3::identity().retract(&nalgebra::Vector6::new(0.1, 0.2, 0.3, 0.01, -0.02, 0.03)),
            ],
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_trajectory_csv(f.path(), &traj).unwrap();
        let back = read_trajectory_csv(f.path()).unwrap();
        assert_eq!(back.frames, traj.frames);
        for (a, b) in back.poses.iter().zip(&traj.poses) {
            assert!((a.rotation - b.rotation).amax() < 1e-12);
            assert_eq!(a.translation, b.translation);
        }
    }

    #[test]
    fn landmark_csv_round_trip() {
        let rows = vec![LandmarkRow {
            id: 42,
            position: Vector3::new(0.5, -0.125, 1.0),
            n_observations: 3,
        }];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_landmark_csv(f.path(), &rows).unwrap();
        assert_eq!(read_landmark_csv(f.path()).unwrap(), rows);
        std::fs::write(f.path(), "id,x,y,z,n_observations\n1,2,3\n").unwrap();
        assert!(matches!(read_landmark_csv(f.path()), Err(Error::Parse { line: 2, .. })));
    }
}
