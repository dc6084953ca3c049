//! Pose text format: one line per image, `image_id qw qx qy qz tx ty tz`,
//! world-to-camera with a scalar-first quaternion. Blank lines and lines
//! starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{Pose, PoseSet, Vec3};
use crate::ImageId;

#[derive(Debug, Error)]
pub enum PoseFileError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub fn format_poses(poses: &PoseSet) -> String {
    let mut out = String::new();
    for (id, pose) in poses {
        let q = pose.rotation().quaternion();
        let t = pose.translation();
        // `{}` on f64 is the shortest round-tripping decimal, independent of locale
        writeln!(out, "{} {} {} {} {} {} {} {}", id, q.w, q.i, q.j, q.k, t.x, t.y, t.z).unwrap();
    }
    out
}

pub fn parse_poses(text: &str) -> Result<PoseSet, PoseFileError> {
    let mut poses = PoseSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| PoseFileError::Parse { line: i + 1, reason };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let id: ImageId = fields[0]
            .parse()
            .map_err(|e| err(format!("bad image id {:?}: {e}", fields[0])))?;
        let mut v = [0.0f64; 7];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| err(format!("bad number {f:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite value {f:?}")));
            }
        }
        let qn = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
        if qn < 1e-12 {
            return Err(err("zero quaternion".into()));
        }
        if poses.insert(id, Pose::from_wxyz(v[0], v[1], v[2], v[3], Vec3::new(v[4], v[5], v[6]))).is_some() {
            return Err(err(format!("duplicate image id {id}")));
        }
    }
    Ok(poses)
}

pub fn read_poses(path: &Path) -> Result<PoseSet, PoseFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| PoseFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_poses(&text)
}

pub fn write_poses(path: &Path, poses: &PoseSet) -> Result<(), PoseFileError> {
    std::fs::write(path, format_poses(poses)).map_err(|source| PoseFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quat;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn text_round_trip_is_exact(
            ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0,
            tx in -1e3f64..1e3, ty in -1e3f64..1e3, tz in -1e3f64..1e3,
            id in 0u32..100000,
        ) {
            let mut poses = PoseSet::new();
            poses.insert(ImageId(id), Pose::new(Quat::from_scaled_axis(Vec3::new(ax, ay, az)), Vec3::new(tx, ty, tz)));
            let text = format_poses(&poses);
            let back = parse_poses(&text).unwrap();
            prop_assert_eq!(format_poses(&back), text);
            prop_assert_eq!(back[&ImageId(id)].translation(), poses[&ImageId(id)].translation());
        }
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(parse_poses("1 1 0 0 0 1 2"), Err(PoseFileError::Parse { line: 1, .. })));
        assert!(parse_poses("# header\n\n1 1 0 0 0 1 2 x").is_err());
        assert!(parse_poses("1 0 0 0 0 1 2 3").is_err());
        assert!(parse_poses("1 1 0 0 0 1 2 3\n1 1 0 0 0 1 2 3").is_err());
        let ok = parse_poses("# c\n7 1 0 0 0 1 2 3\n").unwrap();
        assert_eq!(ok[&ImageId(7)].translation(), &Vec3::new(1.0, 2.0, 3.0));
    }
}
