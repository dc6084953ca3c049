//! Global image descriptors, the thresholded similarity graph, and seed and
//! reference selection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use crate::provider::SyntheticScene;
use crate::ImageId;

/// Default edge threshold.
pub const DEFAULT_S_SIM: f64 = 0.3;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("descriptor for image {0} has zero norm")]
    ZeroDescriptor(ImageId),
    #[error("descriptor for image {id} has length {got}, expected {expected}")]
    DimensionMismatch { id: ImageId, expected: usize, got: usize },
    #[error("duplicate descriptor for image {0}")]
    Duplicate(ImageId),
    #[error("need at least 2 descriptors, got {0}")]
    TooFewImages(usize),
    #[error("no descriptor for image {id} in {path}")]
    Missing { id: ImageId, path: String },
    #[error("similarity graph has no edges at s_sim = {0}; lower s_sim")]
    NoEdges(f64),
    #[error("no registered image connects to an unregistered one")]
    FrontierExhausted,
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

/// L2-normalized global descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    image_id: ImageId,
    vector: Vec<f64>,
}

impl Descriptor {
    /// Normalizes `vector`.
    pub fn new(image_id: ImageId, vector: Vec<f64>) -> Result<Self, GraphError> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(GraphError::ZeroDescriptor(image_id));
        }
        Ok(Self {
            image_id,
            vector: vector.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn image_id(&self) -> ImageId {
        self.image_id
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }
}

/// Cosine similarity clamped to `[0, 1]`.
pub fn cosine_similarity(a: &Descriptor, b: &Descriptor) -> f64 {
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    dot.clamp(0.0, 1.0)
}

/// Indicator descriptors over explicit point-id sets, one dimension per id.
pub fn descriptors_from_sets(sets: &[(ImageId, Vec<u32>)]) -> Result<Vec<Descriptor>, GraphError> {
    let all: BTreeSet<u32> = sets.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let index: BTreeMap<u32, usize> = all.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    sets.iter()
        .map(|(id, s)| {
            let mut v = vec![0.0; index.len()];
            for p in s {
                v[index[p]] = 1.0;
            }
            Descriptor::new(*id, v)
        })
        .collect()
}

/// Co-visibility descriptors from scene ground truth: counts of visible
/// surface points per cubic voxel of side `voxel`.
pub fn covis_descriptors(scene: &SyntheticScene, voxel: f64) -> Result<Vec<Descriptor>, GraphError> {
    let key = |p: &crate::geometry::Vec3| {
        (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        )
    };
    let pts = scene.surface_points();
    let ids = scene.image_ids();
    let mut buckets: BTreeMap<(i64, i64, i64), usize> = BTreeMap::new();
    for id in &ids {
        for &p in scene.visible(*id).unwrap_or(&[]) {
            let n = buckets.len();
            buckets.entry(key(&pts[p as usize])).or_insert(n);
        }
    }
    ids.iter()
        .map(|id| {
            let mut v = vec![0.0; buckets.len()];
            for &p in scene.visible(*id).unwrap_or(&[]) {
                v[buckets[&key(&pts[p as usize])]] += 1.0;
            }
            Descriptor::new(*id, v)
        })
        .collect()
}

/// Parses `image_id v1 .. vD` lines; every row must have the same D.
pub fn parse_descriptors(text: &str, path: &Path) -> Result<Vec<Descriptor>, GraphError> {
    let mut out: Vec<Descriptor> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut dim = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| GraphError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let mut f = line.split_whitespace();
        let id_s = f.next().unwrap();
        let id: ImageId = id_s.parse().map_err(|e| err(format!("bad image id {id_s:?}: {e}")))?;
        let v = f
            .map(|s| s.parse::<f64>().map_err(|e| err(format!("bad number {s:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if v.is_empty() {
            return Err(err("empty descriptor".into()));
        }
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(GraphError::DimensionMismatch {
                    id,
                    expected: d,
                    got: v.len(),
                })
            }
            _ => {}
        }
        if !seen.insert(id) {
            return Err(GraphError::Duplicate(id));
        }
        out.push(Descriptor::new(id, v)?);
    }
    Ok(out)
}

pub fn read_descriptors(path: &Path) -> Result<Vec<Descriptor>, GraphError> {
    let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_descriptors(&text, path)
}

/// Reads descriptors and checks that every id in `ids` has one.
pub fn read_descriptors_for(path: &Path, ids: &[ImageId]) -> Result<Vec<Descriptor>, GraphError> {
    let all = read_descriptors(path)?;
    let by_id: BTreeMap<ImageId, Descriptor> = all.into_iter().map(|d| (d.image_id, d)).collect();
    ids.iter()
        .map(|id| {
            by_id.get(id).cloned().ok_or_else(|| GraphError::Missing {
                id: *id,
                path: path.display().to_string(),
            })
        })
        .collect()
}

pub fn format_descriptors(descriptors: &[Descriptor]) -> String {
    let mut out = String::new();
    for d in descriptors {
        out.push_str(&d.image_id.to_string());
        for v in &d.vector {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Undirected weighted graph; every edge weight is at least `s_sim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    s_sim: f64,
    adjacency: BTreeMap<ImageId, BTreeMap<ImageId, f64>>,
}

impl SimilarityGraph {
    /// Graph on `nodes` from explicit edges, without thresholding.
    pub fn from_edges(nodes: &[ImageId], edges: &[(ImageId, ImageId, f64)], s_sim: f64) -> Self {
        let mut adjacency: BTreeMap<ImageId, BTreeMap<ImageId, f64>> = nodes.iter().map(|n| (*n, BTreeMap::new())).collect();
        for &(a, b, w) in edges {
            if a == b {
                continue;
            }
            adjacency.entry(a).or_default().insert(b, w);
            adjacency.entry(b).or_default().insert(a, w);
        }
        Self { s_sim, adjacency }
    }

    pub fn s_sim(&self) -> f64 {
        self.s_sim
    }

    pub fn nodes(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.adjacency.contains_key(&id)
    }

    /// Edges with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(ImageId, ImageId, f64)> {
        self.adjacency
            .iter()
            .flat_map(|(a, n)| n.iter().filter(move |(b, _)| a < *b).map(move |(b, w)| (*a, *b, *w)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(|n| n.len()).sum::<usize>() / 2
    }

    pub fn weight(&self, a: ImageId, b: ImageId) -> Option<f64> {
        self.adjacency.get(&a).and_then(|n| n.get(&b)).copied()
    }

    /// Neighbours in ascending id order.
    pub fn neighbors(&self, id: ImageId) -> impl Iterator<Item = (ImageId, f64)> + '_ {
        self.adjacency.get(&id).into_iter().flat_map(|n| n.iter().map(|(b, w)| (*b, *w)))
    }

    pub fn degree(&self, id: ImageId) -> usize {
        self.adjacency.get(&id).map_or(0, |n| n.len())
    }

    /// Neighbour of `id` with the highest weight among `among`; ties by smallest id.
    pub fn most_similar(&self, id: ImageId, among: &BTreeSet<ImageId>) -> Option<ImageId> {
        let mut best: Option<(ImageId, f64)> = None;
        for (b, w) in self.neighbors(id) {
            if among.contains(&b) && best.is_none_or(|(_, bw)| w > bw) {
                best = Some((b, w));
            }
        }
        best.map(|(b, _)| b)
    }
}

/// Complete graph on cosine similarities with edges below `s_sim` removed.
pub fn build_graph(descriptors: &[Descriptor], s_sim: f64) -> Result<SimilarityGraph, GraphError> {
    if descriptors.len() < 2 {
        return Err(GraphError::TooFewImages(descriptors.len()));
    }
    let dim = descriptors[0].vector.len();
    let mut seen = BTreeSet::new();
    for d in descriptors {
        if d.vector.len() != dim {
            return Err(GraphError::DimensionMismatch {
                id: d.image_id,
                expected: dim,
                got: d.vector.len(),
            });
        }
        if !seen.insert(d.image_id) {
            return Err(GraphError::Duplicate(d.image_id));
        }
    }
    // sort so the result does not depend on input order
    let mut sorted: Vec<&Descriptor> = descriptors.iter().collect();
    sorted.sort_by_key(|d| d.image_id);
    let nodes: Vec<ImageId> = sorted.iter().map(|d| d.image_id).collect();
    let mut edges = Vec::new();
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            let w = cosine_similarity(a, b);
            if w >= s_sim {
                edges.push((a.image_id, b.image_id, w));
            }
        }
    }
    Ok(SimilarityGraph::from_edges(&nodes, &edges, s_sim))
}

/// Node of maximum degree; ties by smallest id.
pub fn select_seed(graph: &SimilarityGraph) -> Result<ImageId, GraphError> {
    if graph.edge_count() == 0 {
        return Err(GraphError::NoEdges(graph.s_sim));
    }
    let mut best = None;
    for id in graph.nodes() {
        let d = graph.degree(id);
        if best.is_none_or(|(_, bd)| d > bd) {
            best = Some((id, d));
        }
    }
    Ok(best.unwrap().0)
}

/// Registered node with the most edges into `unregistered`; ties by smallest id.
pub fn select_reference(
    graph: &SimilarityGraph,
    registered: &BTreeSet<ImageId>,
    unregistered: &BTreeSet<ImageId>,
) -> Result<ImageId, GraphError> {
    select_reference_excluding(graph, registered, unregistered, &BTreeSet::new())
}

/// As [`select_reference`], ignoring `(reference, target)` pairs in `exclude`.
pub fn select_reference_excluding(
    graph: &SimilarityGraph,
    registered: &BTreeSet<ImageId>,
    unregistered: &BTreeSet<ImageId>,
    exclude: &BTreeSet<(ImageId, ImageId)>,
) -> Result<ImageId, GraphError> {
    let mut best: Option<(ImageId, usize)> = None;
    for &r in registered {
        let n = graph
            .neighbors(r)
            .filter(|(b, _)| unregistered.contains(b) && !exclude.contains(&(r, *b)))
            .count();
        if n > 0 && best.is_none_or(|(_, bn)| n > bn) {
            best = Some((r, n));
        }
    }
    best.map(|(r, _)| r).ok_or(GraphError::FrontierExhausted)
}
