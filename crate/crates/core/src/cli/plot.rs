use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::geometry::{align_and_evaluate, GeometryError, PoseSet, Vec3};

const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;

/// Top-down scatter of ground-truth and aligned predicted camera centers,
/// projected onto the two principal axes of the ground-truth centers.
pub fn centers_svg(pred: &PoseSet, gt: &PoseSet) -> Result<String, GeometryError> {
    let e = align_and_evaluate(pred, gt)?;
    let pairs: Vec<(Vec3, Vec3)> = e
        .per_image
        .keys()
        .map(|id| (gt[id].center(), e.alignment.apply(&pred[id].center())))
        .collect();
    let mean = pairs.iter().map(|p| p.0).sum::<Vec3>() / pairs.len() as f64;
    let mut cov = Matrix3::zeros();
    for (g, _) in &pairs {
        let d = g - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (u, v) = (eig.eigenvectors.column(order[0]).into_owned(), eig.eigenvectors.column(order[1]).into_owned());
    let project = |x: &Vec3| ((x - mean).dot(&u), (x - mean).dot(&v));

    let projected: Vec<((f64, f64), (f64, f64))> = pairs.iter().map(|(g, p)| (project(g), project(p))).collect();
    let extent = projected
        .iter()
        .flat_map(|(a, b)| [a.0.abs(), a.1.abs(), b.0.abs(), b.1.abs()])
        .fold(0.0, f64::max)
        .max(1e-12);
    let k = (SIZE / 2.0 - MARGIN) / extent;
    let to_px = |(x, y): (f64, f64)| (SIZE / 2.0 + k * x, SIZE / 2.0 - k * y);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (g, p) in &projected {
        let (gx, gy) = to_px(*g);
        let (px, py) = to_px(*p);
        writeln!(s, r#"<line x1="{gx:.2}" y1="{gy:.2}" x2="{px:.2}" y2="{py:.2}" stroke="gray" stroke-width="1"/>"#).unwrap();
    }
    for (g, _) in &projected {
        let (x, y) = to_px(*g);
        writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="none" stroke="steelblue" stroke-width="1.5"/>"#).unwrap();
    }
    for (_, p) in &projected {
        let (x, y) = to_px(*p);
        writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="firebrick"/>"#).unwrap();
    }
    writeln!(s, r#"<text x="12" y="20" font-family="sans-serif" font-size="13" fill="steelblue">ground truth</text>"#).unwrap();
    writeln!(s, r#"<text x="12" y="38" font-family="sans-serif" font-size="13" fill="firebrick">predicted (aligned)</text>"#).unwrap();
    writeln!(
        s,
        r#"<text x="12" y="{:.0}" font-family="sans-serif" font-size="12" fill="black">{} cameras, mean rotation error {:.4} deg, mean center error {:.4}</text>"#,
        SIZE - 12.0,
        projected.len(),
        e.mean_rotation_deg,
        e.mean_translation
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}
