//! Multi-view point tracks: cross-image observation matching, union-find
//! grouping and cleanup.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{Vec2, Vec3};
use crate::provider::Pointmap;
use crate::registration::build_correspondences;
use crate::ImageId;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("oracle matching needs corr_id channels; image {0} has none")]
    MissingCorr(ImageId),
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub image_id: ImageId,
    pub pixel: Vec2,
    pub point: Vec3,
}

/// Observations from one image, with optional surface ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub image_id: ImageId,
    pub observations: Vec<Observation>,
    pub corr_ids: Option<Vec<Option<u64>>>,
}

impl ObservationSet {
    /// Downsampled observations of `pm`, one per block as in registration.
    pub fn from_pointmap(image_id: ImageId, pm: &Pointmap, downsample: u32) -> Self {
        let corrs = build_correspondences(pm, downsample);
        let corr_ids = pm.has_corr().then(|| {
            corrs
                .iter()
                .map(|c| pm.corr(pm.index(c.cell.0, c.cell.1)))
                .collect()
        });
        Self {
            image_id,
            observations: corrs
                .iter()
                .map(|c| Observation {
                    image_id,
                    pixel: c.pixel,
                    point: c.point,
                })
                .collect(),
            corr_ids,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: usize,
    pub point: Vec3,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchMode {
    /// Pair observations sharing a surface id.
    Oracle,
    /// Pair mutual nearest predicted points closer than `radius`.
    Proximity { radius: f64 },
}

/// Union-find over `0..n` with path compression and union by rank.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Merges the sets of `a` and `b`; false if they were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }

    /// All sets, each ascending, ordered by smallest member.
    pub fn components(&mut self) -> Vec<Vec<usize>> {
        let mut by_root: HashMap<usize, usize> = HashMap::new();
        let mut out: Vec<Vec<usize>> = Vec::new();
        for i in 0..self.len() {
            let r = self.find(i);
            let slot = *by_root.entry(r).or_insert_with(|| {
                out.push(Vec::new());
                out.len() - 1
            });
            out[slot].push(i);
        }
        out
    }
}

/// Concatenation of all observations; pair indices refer to this order.
pub fn flatten(sets: &[ObservationSet]) -> Vec<Observation> {
    sets.iter().flat_map(|s| s.observations.iter().copied()).collect()
}

fn cell_key(p: &Vec3, size: f64) -> (i64, i64, i64) {
    ((p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64)
}

/// Candidate cross-image matches as index pairs `(i, j)`, `i < j`, into
/// [`flatten`]`(sets)`. `adjacent` restricts which image pairs may match.
pub fn propose_matches(
    sets: &[ObservationSet],
    mode: MatchMode,
    adjacent: &dyn Fn(ImageId, ImageId) -> bool,
) -> Result<Vec<(usize, usize)>, TrackError> {
    let obs = flatten(sets);
    let mut pairs = Vec::new();
    match mode {
        MatchMode::Oracle => {
            let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            let mut offset = 0;
            for s in sets {
                let ids = s.corr_ids.as_ref().ok_or(TrackError::MissingCorr(s.image_id))?;
                for (i, c) in ids.iter().enumerate() {
                    if let Some(c) = c {
                        groups.entry(*c).or_default().push(offset + i);
                    }
                }
                offset += s.observations.len();
            }
            for members in groups.values() {
                for (k, &i) in members.iter().enumerate() {
                    for &j in &members[k + 1..] {
                        if obs[i].image_id != obs[j].image_id && adjacent(obs[i].image_id, obs[j].image_id) {
                            pairs.push((i, j));
                        }
                    }
                }
            }
        }
        MatchMode::Proximity { radius } => {
            if !(radius > 0.0) {
                return Ok(pairs);
            }
            let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
            for (i, o) in obs.iter().enumerate() {
                grid.entry(cell_key(&o.point, radius)).or_default().push(i);
            }
            // nearest observation per (observation, other image)
            let mut nearest: Vec<Vec<(ImageId, f64, usize)>> = vec![Vec::new(); obs.len()];
            for (i, o) in obs.iter().enumerate() {
                let (cx, cy, cz) = cell_key(&o.point, radius);
                let best = &mut nearest[i];
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let Some(cands) = grid.get(&(cx + dx, cy + dy, cz + dz)) else { continue };
                            for &j in cands {
                                let q = &obs[j];
                                if q.image_id == o.image_id {
                                    continue;
                                }
                                let d = (q.point - o.point).norm();
                                if d >= radius || !adjacent(o.image_id, q.image_id) {
                                    continue;
                                }
                                match best.iter_mut().find(|b| b.0 == q.image_id) {
                                    Some(b) => {
                                        if d < b.1 || (d == b.1 && j < b.2) {
                                            *b = (q.image_id, d, j);
                                        }
                                    }
                                    None => best.push((q.image_id, d, j)),
                                }
                            }
                        }
                    }
                }
            }
            for (i, list) in nearest.iter().enumerate() {
                for &(_, _, j) in list {
                    if i < j && nearest[j].iter().any(|b| b.0 == obs[i].image_id && b.2 == i) {
                        pairs.push((i, j));
                    }
                }
            }
            pairs.sort_unstable();
        }
    }
    Ok(pairs)
}

/// Connected components of the pairing graph over `observations`; every
/// component spanning at least two images becomes a track at the centroid
/// of its predicted points.
pub fn build_tracks(observations: &[Observation], pairs: &[(usize, usize)]) -> Vec<Track> {
    let mut ds = DisjointSet::new(observations.len());
    for &(a, b) in pairs {
        ds.union(a, b);
    }
    let mut tracks = Vec::new();
    for comp in ds.components() {
        if comp.len() < 2 {
            continue;
        }
        let images: BTreeSet<ImageId> = comp.iter().map(|i| observations[*i].image_id).collect();
        if images.len() < 2 {
            continue;
        }
        let members: Vec<Observation> = comp.iter().map(|i| observations[*i]).collect();
        let point = members.iter().map(|o| o.point).sum::<Vec3>() / members.len() as f64;
        tracks.push(Track {
            id: tracks.len(),
            point,
            observations: members,
        });
    }
    tracks
}

fn observation_key(t: &Track) -> Vec<(u32, u64, u64)> {
    let mut k: Vec<_> = t
        .observations
        .iter()
        .map(|o| (o.image_id.0, o.pixel.x.to_bits(), o.pixel.y.to_bits()))
        .collect();
    k.sort_unstable();
    k
}

/// Drops tracks observed twice in one image and all but the first of
/// tracks with identical observation sets. Order is preserved.
pub fn filter_ambiguous(tracks: Vec<Track>) -> Vec<Track> {
    let mut seen = BTreeSet::new();
    tracks
        .into_iter()
        .filter(|t| {
            let images: BTreeSet<ImageId> = t.observations.iter().map(|o| o.image_id).collect();
            images.len() == t.observations.len() && images.len() >= 2 && seen.insert(observation_key(t))
        })
        .collect()
}

/// Keeps at most `max` tracks, evenly strided over the input order.
pub fn subsample(tracks: Vec<Track>, max: usize) -> Vec<Track> {
    if tracks.len() <= max {
        return tracks;
    }
    let n = tracks.len();
    let keep: BTreeSet<usize> = (0..max).map(|i| i * n / max).collect();
    tracks
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, t)| t)
        .collect()
}

/// Caps every track at `max_len` observations, evenly strided over its
/// observations sorted by image id. The point is left unchanged.
pub fn limit_length(tracks: Vec<Track>, max_len: usize) -> Vec<Track> {
    tracks
        .into_iter()
        .map(|mut t| {
            t.observations.sort_by_key(|o| o.image_id);
            let n = t.observations.len();
            if n > max_len {
                let obs = std::mem::take(&mut t.observations);
                t.observations = (0..max_len).map(|i| obs[i * n / max_len]).collect();
            }
            t
        })
        .collect()
}

/// Track file: `track_id x y z n (image_id px py)×n`, one track per line.
pub fn format_tracks(tracks: &[Track]) -> String {
    let mut out = String::new();
    for t in tracks {
        write!(out, "{} {} {} {} {}", t.id, t.point.x, t.point.y, t.point.z, t.observations.len()).unwrap();
        for o in &t.observations {
            write!(out, " {} {} {}", o.image_id, o.pixel.x, o.pixel.y).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Points of a track file, in file order. `path` is used in errors only.
pub fn parse_track_points(text: &str, path: &std::path::Path) -> Result<Vec<Vec3>, TrackError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| TrackError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 5 {
            return Err(err(format!("expected at least 5 fields, found {}", f.len())));
        }
        let n: usize = f[4].parse().map_err(|e| err(format!("bad observation count {:?}: {e}", f[4])))?;
        if f.len() != 5 + 3 * n {
            return Err(err(format!("{n} observations need {} fields, found {}", 5 + 3 * n, f.len())));
        }
        let mut p = [0.0; 3];
        for (slot, s) in p.iter_mut().zip(&f[1..4]) {
            *slot = s.parse().map_err(|e| err(format!("bad coordinate {s:?}: {e}")))?;
        }
        out.push(Vec3::new(p[0], p[1], p[2]));
    }
    Ok(out)
}
