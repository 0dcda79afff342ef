//! TUM-format trajectories: `timestamp tx ty tz qx qy qz qw` per line.

use crate::geometry::{PoseSE3, Vec3};
use nalgebra::{Quaternion, UnitQuaternion};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stamped {
    pub timestamp: f64,
    pub pose: PoseSE3,
}

pub fn format_tum(poses: &[Stamped]) -> String {
    let mut s = String::new();
    for p in poses {
        let t = p.pose.translation;
        let q = p.pose.rotation.quaternion();
        writeln!(s, "{:.6} {} {} {} {} {} {} {}", p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w).unwrap();
    }
    s
}

pub fn write_tum(path: &Path, poses: &[Stamped]) -> Result<(), TrajectoryError> {
    std::fs::write(path, format_tum(poses)).map_err(|e| TrajectoryError::Io { path: path.display().to_string(), source: e })
}

/// Parses TUM text. Blank lines and `#` comments are ignored.
pub fn parse_tum(text: &str, origin: &str) -> Result<Vec<Stamped>, TrajectoryError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| TrajectoryError::Parse { path: origin.to_string(), line: i + 1, reason };
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|w| w.parse::<f64>().map_err(|_| err(format!("not a number: {w}"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-9 {
            return Err(err("zero quaternion".into()));
        }
        out.push(Stamped {
            timestamp: v[0],
            pose: PoseSE3::new(unit_quaternion(q), Vec3::new(v[1], v[2], v[3])),
        });
    }
    Ok(out)
}

/// Keeps already-unit quaternions bit-exact so that a parse/format cycle
/// reproduces the text.
fn unit_quaternion(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    if (q.norm() - 1.0).abs() < 1e-12 {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::from_quaternion(q)
    }
}

pub fn read_tum(path: &Path) -> Result<Vec<Stamped>, TrajectoryError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| TrajectoryError::Io { path: path.display().to_string(), source: e })?;
    parse_tum(&text, &path.display().to_string())
}
