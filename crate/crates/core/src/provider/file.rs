//! Pointmaps precomputed by an external regressor.
//!
//! Directory layout: `intrinsics.txt` with lines
//! `image_id fx fy cx cy width height`, and `pointmaps/<image_id>.pmap`
//! holding each image's pointmap in a shared global frame.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{load_pointmap, Pointmap, PointmapProvider, ProviderError};
use crate::geometry::{Intrinsics, Pose, PoseSet};
use crate::ImageId;

pub fn parse_intrinsics(text: &str, path: &Path) -> Result<BTreeMap<ImageId, Intrinsics>, ProviderError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| ProviderError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let id: ImageId = f[0].parse().map_err(|e| err(format!("bad image id {:?}: {e}", f[0])))?;
        let mut v = [0.0f64; 4];
        for (slot, s) in v.iter_mut().zip(&f[1..5]) {
            *slot = s.parse().map_err(|e| err(format!("bad number {s:?}: {e}")))?;
        }
        let w: u32 = f[5].parse().map_err(|e| err(format!("bad width {:?}: {e}", f[5])))?;
        let h: u32 = f[6].parse().map_err(|e| err(format!("bad height {:?}: {e}", f[6])))?;
        let k = Intrinsics::new(v[0], v[1], v[2], v[3], w, h).map_err(|e| err(e.to_string()))?;
        if out.insert(id, k).is_some() {
            return Err(err(format!("duplicate image id {id}")));
        }
    }
    Ok(out)
}

pub fn format_intrinsics(intrinsics: &BTreeMap<ImageId, Intrinsics>) -> String {
    intrinsics
        .iter()
        .map(|(id, k)| format!("{id} {} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height))
        .collect()
}

pub struct FileProvider {
    dir: PathBuf,
    intrinsics: BTreeMap<ImageId, Intrinsics>,
    frame: Pose,
    noise_sigma: f64,
    ground_truth: Option<PoseSet>,
}

impl FileProvider {
    /// `noise_sigma` is the assumed prediction noise, used only to size
    /// merge radii downstream.
    pub fn open(dir: &Path, noise_sigma: f64) -> Result<Self, ProviderError> {
        let path = dir.join("intrinsics.txt");
        let text = std::fs::read_to_string(&path).map_err(|e| ProviderError::io(&path, e))?;
        let intrinsics = parse_intrinsics(&text, &path)?;
        for id in intrinsics.keys() {
            let p = Self::pointmap_path(dir, *id);
            if !p.is_file() {
                return Err(ProviderError::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            intrinsics,
            frame: Pose::identity(),
            noise_sigma,
            ground_truth: None,
        })
    }

    /// Attaches reference poses for evaluation.
    pub fn with_ground_truth(mut self, poses: PoseSet) -> Self {
        self.ground_truth = Some(poses);
        self
    }

    pub fn pointmap_path(dir: &Path, id: ImageId) -> PathBuf {
        dir.join("pointmaps").join(format!("{id}.pmap"))
    }

    fn load(&self, id: ImageId) -> Result<Pointmap, ProviderError> {
        let k = self.intrinsics.get(&id).ok_or(ProviderError::UnknownImage(id))?;
        let path = Self::pointmap_path(&self.dir, id);
        let mut pm = load_pointmap(&path)?;
        if pm.width() != k.width || pm.height() != k.height {
            return Err(ProviderError::Format {
                offset: 6,
                reason: format!(
                    "{}: grid {}x{} does not match intrinsics {}x{}",
                    path.display(),
                    pm.width(),
                    pm.height(),
                    k.width,
                    k.height
                ),
            });
        }
        let frame = self.frame;
        pm.map_points(|x| frame.transform_point(x));
        Ok(pm)
    }
}

impl PointmapProvider for FileProvider {
    fn image_ids(&self) -> Vec<ImageId> {
        self.intrinsics.keys().copied().collect()
    }

    fn intrinsics(&self, id: ImageId) -> Result<Intrinsics, ProviderError> {
        self.intrinsics.get(&id).copied().ok_or(ProviderError::UnknownImage(id))
    }

    fn query(&self, reference: ImageId, target: ImageId) -> Result<(Pointmap, Pointmap), ProviderError> {
        Ok((self.load(reference)?, self.load(target)?))
    }

    fn observe(&mut self, _ids: &[ImageId]) {}

    fn effective_sigma(&self, _id: ImageId) -> f64 {
        self.noise_sigma
    }

    fn set_frame(&mut self, frame: Pose) {
        self.frame = frame;
    }

    fn ground_truth(&self) -> Option<&PoseSet> {
        self.ground_truth.as_ref()
    }
}
