use std::fmt::Write as _;

use crate::geometry::Vec3;

/// ASCII PLY with one `vertex` element per point, coordinates as float32.
pub fn format_ply(points: &[Vec3]) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", points.len()).unwrap();
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in points {
        writeln!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32).unwrap();
    }
    out
}
