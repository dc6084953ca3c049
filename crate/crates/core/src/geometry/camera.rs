use serde::{Deserialize, Serialize};

use super::{GeometryError, Pose, Vec2, Vec3};

/// Minimum camera-frame depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-9;

/// Pinhole intrinsics. Pixel `(col, row)` covers `[col, col+1) x [row, row+1)`
/// in continuous image coordinates, so its center is `(col + 0.5, row + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Camera-frame point to pixel, without the cheirality check.
    pub fn project_camera(&self, p: &Vec3) -> Vec2 {
        Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Un-normalized camera-frame direction `((u-cx)/fx, (v-cy)/fy, 1)`.
    pub fn unproject(&self, pixel: &Vec2) -> Vec3 {
        Vec3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }

    /// Center of pixel `(col, row)`.
    pub fn pixel_center(col: u32, row: u32) -> Vec2 {
        Vec2::new(col as f64 + 0.5, row as f64 + 0.5)
    }
}

/// Projects world point `x` through `pose` and `k`.
pub fn project(k: &Intrinsics, pose: &Pose, x: &Vec3) -> Result<Vec2, GeometryError> {
    let p = pose.transform_point(x);
    if !(p.z > MIN_DEPTH) {
        return Err(GeometryError::BehindCamera { z: p.z });
    }
    Ok(k.project_camera(&p))
}

/// World-frame unit ray from the camera center through `pixel`.
pub fn backproject_ray(k: &Intrinsics, pose: &Pose, pixel: &Vec2) -> Vec3 {
    pose.rotation().inverse() * k.unproject(pixel).normalize()
}
