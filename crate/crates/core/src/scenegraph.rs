//! Domain data model for multimodal 3D scene graphs and their canonical,
//! bit-exact JSON serialization.
//!
//! File schema (UTF-8, floats with 6 decimal places):
//! `{"nodes":[{"id":..,"label":..,"points":[[x,y,z],..],"mesh":{"vertices":..,"faces":..}|null,
//! "caption":..,"referrals":[..],"bbox":{"centroid":[..],"extent":[..]}}],
//! "edges":[{"src":..,"dst":..,"predicate":..}]}`

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// The five per-object information channels. `S` (structure) is derived
/// from node layout rather than carried as a payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModalityKind {
    PointCloud,
    Mesh,
    Structure,
    Caption,
    Referral,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 5] = [
        ModalityKind::PointCloud,
        ModalityKind::Mesh,
        ModalityKind::Structure,
        ModalityKind::Caption,
        ModalityKind::Referral,
    ];

    /// Stable integer code for serialization.
    pub fn code(self) -> u8 {
        match self {
            ModalityKind::PointCloud => 0,
            ModalityKind::Mesh => 1,
            ModalityKind::Structure => 2,
            ModalityKind::Caption => 3,
            ModalityKind::Referral => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        ModalityKind::ALL.into_iter().find(|m| m.code() == code)
    }

    pub fn letter(self) -> char {
        match self {
            ModalityKind::PointCloud => 'P',
            ModalityKind::Mesh => 'M',
            ModalityKind::Structure => 'S',
            ModalityKind::Caption => 'T',
            ModalityKind::Referral => 'R',
        }
    }
}

/// Bit set over the five modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModalityMask(u8);

impl ModalityMask {
    pub const EMPTY: ModalityMask = ModalityMask(0);
    pub const ALL: ModalityMask = ModalityMask(0b11111);

    pub fn with(mut self, k: ModalityKind) -> Self {
        self.0 |= 1 << k.code();
        self
    }

    pub fn without(mut self, k: ModalityKind) -> Self {
        self.0 &= !(1 << k.code());
        self
    }

    pub fn contains(self, k: ModalityKind) -> bool {
        self.0 & (1 << k.code()) != 0
    }

    pub fn intersect(self, other: ModalityMask) -> ModalityMask {
        ModalityMask(self.0 & other.0)
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = ModalityKind> {
        ModalityKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }

    /// Parse letters like "PMSTR" (case-insensitive).
    pub fn parse(s: &str) -> Option<ModalityMask> {
        let mut mask = ModalityMask::EMPTY;
        for c in s.chars() {
            let k = match c.to_ascii_uppercase() {
                'P' => ModalityKind::PointCloud,
                'M' => ModalityKind::Mesh,
                'S' => ModalityKind::Structure,
                'T' => ModalityKind::Caption,
                'R' => ModalityKind::Referral,
                _ => return None,
            };
            mask = mask.with(k);
        }
        Some(mask)
    }
}

impl std::fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for k in self.iter() {
            write!(f, "{}", k.letter())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub centroid: [f32; 3],
    pub extent: [f32; 3],
}

impl Aabb {
    pub fn from_points(points: &[[f32; 3]]) -> Option<Aabb> {
        if points.is_empty() {
            return None;
        }
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some(Aabb {
            centroid: [
                0.5 * (lo[0] + hi[0]),
                0.5 * (lo[1] + hi[1]),
                0.5 * (lo[2] + hi[2]),
            ],
            extent: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
        })
    }

    pub fn min(&self) -> [f32; 3] {
        [
            self.centroid[0] - 0.5 * self.extent[0],
            self.centroid[1] - 0.5 * self.extent[1],
            self.centroid[2] - 0.5 * self.extent[2],
        ]
    }

    pub fn max(&self) -> [f32; 3] {
        [
            self.centroid[0] + 0.5 * self.extent[0],
            self.centroid[1] + 0.5 * self.extent[1],
            self.centroid[2] + 0.5 * self.extent[2],
        ]
    }

    /// Intersection-over-union of two axis-aligned boxes.
    pub fn iou(&self, other: &Aabb) -> f32 {
        let a_min = self.min();
        let a_max = self.max();
        let b_min = other.min();
        let b_max = other.max();
        let mut inter = 1.0f32;
        for a in 0..3 {
            let lo = a_min[a].max(b_min[a]);
            let hi = a_max[a].min(b_max[a]);
            if hi <= lo {
                return 0.0;
            }
            inter *= hi - lo;
        }
        let va = self.extent.iter().product::<f32>();
        let vb = other.extent.iter().product::<f32>();
        let union = va + vb - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One object instance carrying up to five modality payloads plus a 3D
/// bounding box. Labels are evaluation bookkeeping only; encoders never
/// consume them.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNode {
    pub id: u64,
    pub label: Option<String>,
    pub points: Vec<[f32; 3]>,
    pub mesh: Option<TriMesh>,
    pub caption: Option<String>,
    pub referrals: Vec<String>,
    pub bbox: Aabb,
    /// Precomputed external-encoder caption embedding, if supplied.
    pub text_embedding: Option<Vec<f32>>,
    /// Precomputed external-encoder referral embeddings, if supplied.
    pub referral_embeddings: Option<Vec<Vec<f32>>>,
}

impl ObjectNode {
    /// Payload modalities present on this node (excludes the derived S).
    pub fn payload_mask(&self) -> ModalityMask {
        let mut m = ModalityMask::EMPTY;
        if !self.points.is_empty() {
            m = m.with(ModalityKind::PointCloud);
        }
        if self.mesh.is_some() {
            m = m.with(ModalityKind::Mesh);
        }
        if self.caption.is_some() || self.text_embedding.is_some() {
            m = m.with(ModalityKind::Caption);
        }
        if !self.referrals.is_empty() || self.referral_embeddings.is_some() {
            m = m.with(ModalityKind::Referral);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub src: u64,
    pub dst: u64,
    pub predicate: String,
}

/// Attributed directed graph of [`ObjectNode`]s with predicate-labeled edges.
/// Multiple predicates between the same pair are allowed; self-edges are not.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneGraph {
    pub nodes: Vec<ObjectNode>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Error)]
pub enum SceneGraphError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
}

impl SceneGraph {
    pub fn node_index(&self) -> BTreeMap<u64, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    pub fn node(&self, id: u64) -> Option<&ObjectNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Check every structural invariant; errors carry the offending id.
    pub fn validate(&self) -> Result<(), SceneGraphError> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return Err(SceneGraphError::Validation(format!(
                    "duplicate node id {}",
                    n.id
                )));
            }
            if n.payload_mask().is_empty() {
                return Err(SceneGraphError::Validation(format!(
                    "node {} carries no modality payload",
                    n.id
                )));
            }
            for a in 0..3 {
                if !(n.bbox.extent[a] > 0.0) {
                    return Err(SceneGraphError::Validation(format!(
                        "node {}: bbox extent component {} must be strictly positive, got {}",
                        n.id, a, n.bbox.extent[a]
                    )));
                }
            }
            if let Some(mesh) = &n.mesh {
                let nv = mesh.vertices.len() as u32;
                for f in &mesh.faces {
                    if f.iter().any(|&v| v >= nv) {
                        return Err(SceneGraphError::Validation(format!(
                            "node {}: face {:?} references a vertex >= {}",
                            n.id, f, nv
                        )));
                    }
                }
            }
            if !n.points.is_empty() {
                let fitted = Aabb::from_points(&n.points).expect("non-empty");
                for a in 0..3 {
                    if (fitted.centroid[a] - n.bbox.centroid[a]).abs() > 1e-5
                        || (fitted.extent[a] - n.bbox.extent[a]).abs() > 1e-5
                    {
                        return Err(SceneGraphError::Validation(format!(
                            "node {}: bbox does not match the point AABB within 1e-5 \
                             (stored centroid {:?} extent {:?}, fitted centroid {:?} extent {:?})",
                            n.id, n.bbox.centroid, n.bbox.extent, fitted.centroid, fitted.extent
                        )));
                    }
                }
            }
            for p in &n.points {
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(SceneGraphError::Validation(format!(
                        "node {}: non-finite point coordinate",
                        n.id
                    )));
                }
            }
        }
        for e in &self.edges {
            if e.src == e.dst {
                return Err(SceneGraphError::Validation(format!(
                    "self-edge on node {}",
                    e.src
                )));
            }
            if !seen.contains(&e.src) {
                return Err(SceneGraphError::Validation(format!(
                    "edge references absent node id {}",
                    e.src
                )));
            }
            if !seen.contains(&e.dst) {
                return Err(SceneGraphError::Validation(format!(
                    "edge references absent node id {}",
                    e.dst
                )));
            }
        }
        Ok(())
    }

    /// In-neighbor lists per node position: `result[i]` holds positions `j`
    /// with an edge `j -> i`.
    pub fn in_neighbors(&self) -> Vec<Vec<usize>> {
        let idx = self.node_index();
        let mut res = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let (Some(&s), Some(&d)) = (idx.get(&e.src), idx.get(&e.dst)) else {
                continue;
            };
            if !res[d].contains(&s) {
                res[d].push(s);
            }
        }
        res
    }
}

/// Per-node 6-vector: bounding-box centroid relative to the scene centroid,
/// concatenated with the box extent. Relative coordinates keep the features
/// invariant under global translation.
pub fn structure_features(graph: &SceneGraph) -> Vec<[f32; 6]> {
    let n = graph.nodes.len();
    if n == 0 {
        return Vec::new();
    }
    let mut scene = [0.0f32; 3];
    for node in &graph.nodes {
        for a in 0..3 {
            scene[a] += node.bbox.centroid[a];
        }
    }
    for s in scene.iter_mut() {
        *s /= n as f32;
    }
    graph
        .nodes
        .iter()
        .map(|node| {
            [
                node.bbox.centroid[0] - scene[0],
                node.bbox.centroid[1] - scene[1],
                node.bbox.centroid[2] - scene[2],
                node.bbox.extent[0],
                node.bbox.extent[1],
                node.bbox.extent[2],
            ]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// canonical serialization
// ---------------------------------------------------------------------------

/// 6-decimal float with negative zero collapsed so identical graphs always
/// produce identical bytes.
fn fmt_f32(out: &mut String, v: f32) {
    let v = if v == 0.0 { 0.0 } else { v };
    let _ = write!(out, "{v:.6}");
}

fn fmt_vec3(out: &mut String, v: &[f32; 3]) {
    out.push('[');
    for (i, c) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        fmt_f32(out, *c);
    }
    out.push(']');
}

fn fmt_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serialization"));
}

/// Canonical byte form: nodes sorted by id, edges sorted by
/// (src, dst, predicate), fixed key order, fixed float formatting.
pub fn to_canonical_json(graph: &SceneGraph) -> Result<String, SceneGraphError> {
    graph.validate()?;
    let mut nodes: Vec<&ObjectNode> = graph.nodes.iter().collect();
    nodes.sort_by_key(|n| n.id);
    let mut edges: Vec<&Edge> = graph.edges.iter().collect();
    edges.sort_by(|a, b| {
        (a.src, a.dst, &a.predicate).cmp(&(b.src, b.dst, &b.predicate))
    });

    let mut out = String::new();
    out.push_str("{\"nodes\":[");
    for (i, n) in nodes.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{{\"id\":{}", n.id);
        out.push_str(",\"label\":");
        match &n.label {
            Some(l) => fmt_str(&mut out, l),
            None => out.push_str("null"),
        }
        out.push_str(",\"points\":[");
        for (j, p) in n.points.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            fmt_vec3(&mut out, p);
        }
        out.push_str("],\"mesh\":");
        match &n.mesh {
            Some(m) => {
                out.push_str("{\"vertices\":[");
                for (j, v) in m.vertices.iter().enumerate() {
                    if j > 0 {
                        out.push(',');
                    }
                    fmt_vec3(&mut out, v);
                }
                out.push_str("],\"faces\":[");
                for (j, f) in m.faces.iter().enumerate() {
                    if j > 0 {
                        out.push(',');
                    }
                    let _ = write!(out, "[{},{},{}]", f[0], f[1], f[2]);
                }
                out.push_str("]}");
            }
            None => out.push_str("null"),
        }
        out.push_str(",\"caption\":");
        match &n.caption {
            Some(c) => fmt_str(&mut out, c),
            None => out.push_str("null"),
        }
        out.push_str(",\"referrals\":[");
        for (j, r) in n.referrals.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            fmt_str(&mut out, r);
        }
        out.push_str("],\"bbox\":{\"centroid\":");
        fmt_vec3(&mut out, &n.bbox.centroid);
        out.push_str(",\"extent\":");
        fmt_vec3(&mut out, &n.bbox.extent);
        out.push_str("}}");
    }
    out.push_str("],\"edges\":[");
    for (i, e) in edges.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{{\"src\":{},\"dst\":{},\"predicate\":", e.src, e.dst);
        fmt_str(&mut out, &e.predicate);
        out.push('}');
    }
    out.push_str("]}");
    Ok(out)
}

pub fn save_scene_graph(graph: &SceneGraph, path: &Path) -> Result<(), SceneGraphError> {
    let json = to_canonical_json(graph)?;
    std::fs::write(path, json)?;
    Ok(())
}

#[derive(Deserialize)]
struct RawGraph {
    nodes: Vec<RawNode>,
    edges: Vec<RawEdge>,
}

#[derive(Deserialize)]
struct RawNode {
    id: u64,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    points: Vec<[f32; 3]>,
    #[serde(default)]
    mesh: Option<RawMesh>,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    referrals: Vec<String>,
    bbox: RawBbox,
}

#[derive(Deserialize)]
struct RawMesh {
    vertices: Vec<[f32; 3]>,
    faces: Vec<[u32; 3]>,
}

#[derive(Deserialize)]
struct RawBbox {
    centroid: [f32; 3],
    extent: [f32; 3],
}

#[derive(Deserialize)]
struct RawEdge {
    src: u64,
    dst: u64,
    predicate: String,
}

pub fn scene_graph_from_json(json: &str) -> Result<SceneGraph, SceneGraphError> {
    let raw: RawGraph =
        serde_json::from_str(json).map_err(|e| SceneGraphError::Parse(e.to_string()))?;
    let graph = SceneGraph {
        nodes: raw
            .nodes
            .into_iter()
            .map(|n| ObjectNode {
                id: n.id,
                label: n.label,
                points: n.points,
                mesh: n.mesh.map(|m| TriMesh {
                    vertices: m.vertices,
                    faces: m.faces,
                }),
                caption: n.caption,
                referrals: n.referrals,
                bbox: Aabb {
                    centroid: n.bbox.centroid,
                    extent: n.bbox.extent,
                },
                text_embedding: None,
                referral_embeddings: None,
            })
            .collect(),
        edges: raw
            .edges
            .into_iter()
            .map(|e| Edge {
                src: e.src,
                dst: e.dst,
                predicate: e.predicate,
            })
            .collect(),
    };
    graph.validate()?;
    Ok(graph)
}

pub fn load_scene_graph(path: &Path) -> Result<SceneGraph, SceneGraphError> {
    let json = std::fs::read_to_string(path)?;
    scene_graph_from_json(&json)
}
