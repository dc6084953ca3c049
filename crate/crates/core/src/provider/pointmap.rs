use std::path::Path;

use crate::geometry::{Intrinsics, Vec2, Vec3};

use super::ProviderError;

/// Sentinel stored in the corr_id channel for samples without a surface id.
pub const NO_CORR: u64 = u64::MAX;

const MAGIC: &[u8; 4] = b"PMAP";
const VERSION: u16 = 1;
const FLAG_CORR: u16 = 1 << 0;
const FLAG_PIXELS: u16 = 1 << 1;
const HEADER_LEN: usize = 16;
/// Largest accepted grid, in samples.
const MAX_SAMPLES: u64 = 1 << 28;

/// Per-pixel 3D points in the provider's global frame.
///
/// Optional channels: `corr_id` carries the surface-point id a sample was
/// rendered from (synthetic scenes only), and `pixels` carries the exact
/// sub-pixel image location a sample was observed at. Without `pixels`, a
/// sample is located at its pixel center.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    width: u32,
    height: u32,
    points: Vec<Vec3>,
    valid: Vec<bool>,
    corr_id: Option<Vec<u64>>,
    pixels: Option<Vec<Vec2>>,
}

impl Pointmap {
    /// All-invalid grid.
    pub fn new(width: u32, height: u32, with_corr: bool, with_pixels: bool) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            points: vec![Vec3::zeros(); n],
            valid: vec![false; n],
            corr_id: with_corr.then(|| vec![NO_CORR; n]),
            pixels: with_pixels.then(|| vec![Vec2::zeros(); n]),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_corr(&self) -> bool {
        self.corr_id.is_some()
    }

    pub fn has_pixels(&self) -> bool {
        self.pixels.is_some()
    }

    pub fn index(&self, col: u32, row: u32) -> usize {
        row as usize * self.width as usize + col as usize
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    pub fn point(&self, idx: usize) -> &Vec3 {
        &self.points[idx]
    }

    pub fn corr(&self, idx: usize) -> Option<u64> {
        self.corr_id.as_ref().map(|c| c[idx]).filter(|&c| c != NO_CORR)
    }

    /// Image location of sample `idx`.
    pub fn pixel(&self, idx: usize) -> Vec2 {
        match &self.pixels {
            Some(p) => p[idx],
            None => {
                let w = self.width as usize;
                Intrinsics::pixel_center((idx % w) as u32, (idx / w) as u32)
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Marks a sample valid. `corr` and `pixel` are ignored when the channel is absent.
    pub fn set(&mut self, idx: usize, point: Vec3, corr: Option<u64>, pixel: Option<Vec2>) {
        self.points[idx] = point;
        self.valid[idx] = true;
        if let Some(c) = &mut self.corr_id {
            c[idx] = corr.unwrap_or(NO_CORR);
        }
        if let (Some(p), Some(px)) = (&mut self.pixels, pixel) {
            p[idx] = px;
        }
    }

    pub fn set_point(&mut self, idx: usize, point: Vec3) {
        self.points[idx] = point;
    }

    pub fn clear_corr(&mut self, idx: usize) {
        if let Some(c) = &mut self.corr_id {
            c[idx] = NO_CORR;
        }
    }

    pub fn invalidate(&mut self, idx: usize) {
        self.valid[idx] = false;
        self.points[idx] = Vec3::zeros();
        self.clear_corr(idx);
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i)
    }

    /// Applies `f` to every valid point.
    pub fn map_points(&mut self, f: impl Fn(&Vec3) -> Vec3) {
        for (p, v) in self.points.iter_mut().zip(&self.valid) {
            if *v {
                *p = f(p);
            }
        }
    }

    /// Serializes to the PMAP binary layout.
    ///
    /// Points are stored as f32; the sub-pixel channel, when present, is
    /// written as f64 pairs behind flag bit 1.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut flags = 0u16;
        if self.corr_id.is_some() {
            flags |= FLAG_CORR;
        }
        if self.pixels.is_some() {
            flags |= FLAG_PIXELS;
        }
        let mut out = Vec::with_capacity(HEADER_LEN + n * (12 + 1 + 8 + 16));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        for p in &self.points {
            for c in p.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out.extend(self.valid.iter().map(|v| *v as u8));
        if let Some(c) = &self.corr_id {
            for id in c {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        if let Some(px) = &self.pixels {
            for p in px {
                out.extend_from_slice(&p.x.to_le_bytes());
                out.extend_from_slice(&p.y.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProviderError> {
        let fmt = |offset: usize, reason: String| ProviderError::Format { offset, reason };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(
                0,
                format!("truncated header: expected {HEADER_LEN} bytes, got {}", bytes.len()),
            ));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let width = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
        let flags = u16::from_le_bytes([bytes[14], bytes[15]]);
        if flags & !(FLAG_CORR | FLAG_PIXELS) != 0 {
            return Err(fmt(14, format!("unknown flag bits {flags:#06x}")));
        }
        let samples = width as u64 * height as u64;
        if samples > MAX_SAMPLES {
            return Err(fmt(6, format!("dimensions {width}x{height} exceed the {MAX_SAMPLES}-sample limit")));
        }
        let n = samples as usize;
        let mut expected = HEADER_LEN as u64 + samples * 13;
        if flags & FLAG_CORR != 0 {
            expected += samples * 8;
        }
        if flags & FLAG_PIXELS != 0 {
            expected += samples * 16;
        }
        if bytes.len() as u64 != expected {
            return Err(fmt(
                bytes.len().min(expected as usize),
                format!("expected {expected} bytes for a {width}x{height} grid, got {}", bytes.len()),
            ));
        }

        let mut off = HEADER_LEN;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let mut c = [0.0f64; 3];
            for v in &mut c {
                *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
                off += 4;
            }
            points.push(Vec3::from(c));
        }
        let mut valid = Vec::with_capacity(n);
        for _ in 0..n {
            match bytes[off] {
                0 => valid.push(false),
                1 => valid.push(true),
                b => return Err(fmt(off, format!("valid byte must be 0 or 1, got {b}"))),
            }
            off += 1;
        }
        for (i, (p, v)) in points.iter().zip(&valid).enumerate() {
            if *v && !p.iter().all(|c| c.is_finite()) {
                return Err(fmt(HEADER_LEN + 12 * i, "non-finite point in a valid sample".into()));
            }
        }
        let corr_id = (flags & FLAG_CORR != 0).then(|| {
            let c: Vec<u64> = (0..n)
                .map(|i| u64::from_le_bytes(bytes[off + 8 * i..off + 8 * i + 8].try_into().unwrap()))
                .collect();
            off += 8 * n;
            c
        });
        let pixels = (flags & FLAG_PIXELS != 0).then(|| {
            (0..n)
                .map(|i| {
                    let b = off + 16 * i;
                    Vec2::new(
                        f64::from_le_bytes(bytes[b..b + 8].try_into().unwrap()),
                        f64::from_le_bytes(bytes[b + 8..b + 16].try_into().unwrap()),
                    )
                })
                .collect()
        });
        Ok(Self {
            width,
            height,
            points,
            valid,
            corr_id,
            pixels,
        })
    }
}

pub fn save_pointmap(pm: &Pointmap, path: &Path) -> Result<(), ProviderError> {
    std::fs::write(path, pm.to_bytes()).map_err(|e| ProviderError::io(path, e))
}

pub fn load_pointmap(path: &Path) -> Result<Pointmap, ProviderError> {
    let bytes = std::fs::read(path).map_err(|e| ProviderError::io(path, e))?;
    Pointmap::from_bytes(&bytes).map_err(|e| match e {
        ProviderError::Format { offset, reason } => ProviderError::Format {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pointmap(rng: &mut impl Rng, w: u32, h: u32, corr: bool, pixels: bool) -> Pointmap {
        let mut pm = Pointmap::new(w, h, corr, pixels);
        for i in 0..pm.len() {
            if rng.random_bool(0.7) {
                let p = Vec3::new(rng.random::<f32>() as f64, rng.random::<f32>() as f64, -(rng.random::<f32>() * 100.0) as f64);
                let px = Vec2::new(rng.random::<f64>() * w as f64, rng.random::<f64>() * h as f64);
                pm.set(i, p, Some(rng.random_range(0..1000)), Some(px));
            }
        }
        pm
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (corr, pixels) in [(false, false), (true, false), (true, true), (false, true)] {
            let pm = random_pointmap(&mut rng, 8, 8, corr, pixels);
            let bytes = pm.to_bytes();
            let back = Pointmap::from_bytes(&bytes).unwrap();
            assert_eq!(back, pm);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let pm = Pointmap::new(3, 2, true, false);
        let b = pm.to_bytes();
        assert_eq!(&b[0..4], b"PMAP");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[10..14].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes([b[14], b[15]]), 1);
        assert_eq!(b.len(), 16 + 6 * 12 + 6 + 6 * 8);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut b = Pointmap::new(2, 2, false, false).to_bytes();
        b[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(Pointmap::from_bytes(&b), Err(ProviderError::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let b = Pointmap::new(8, 8, false, false).to_bytes();
        // header promises 64 points, body carries 10
        let cut = &b[..16 + 10 * 12];
        let err = Pointmap::from_bytes(cut).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("expected {}", b.len())), "{msg}");
        assert!(msg.contains(&format!("got {}", cut.len())), "{msg}");
    }

    #[test]
    fn oversized_dimensions_rejected() {
        let mut b = Pointmap::new(1, 1, false, false).to_bytes();
        b[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        b[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(Pointmap::from_bytes(&b), Err(ProviderError::Format { offset: 6, .. })));
    }

    #[test]
    fn invalid_mask_byte_rejected() {
        let mut b = Pointmap::new(2, 1, false, false).to_bytes();
        b[16 + 24] = 7;
        assert!(matches!(Pointmap::from_bytes(&b), Err(ProviderError::Format { offset: 40, .. })));
    }

    #[test]
    fn pixel_defaults_to_cell_center() {
        let pm = Pointmap::new(4, 3, false, false);
        assert_eq!(pm.pixel(pm.index(2, 1)), Vec2::new(2.5, 1.5));
    }
}
