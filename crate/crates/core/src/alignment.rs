//! Inference-side matching and evaluation: the pairwise similarity matrix,
//! greedy mutual-best node matching, ranking metrics, scene-level overlap
//! classification, and unified scene-graph construction.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::fusion::NodeEmbeddingSet;
use crate::scenegraph::{Aabb, Edge, ObjectNode, SceneGraph, TriMesh};

/// Accept a match when the [0,1]-mapped similarity reaches this value
/// (equivalent to a raw cosine of 0.5).
pub const DEFAULT_MATCH_THRESHOLD: f32 = 0.75;
/// Classify a scene pair as overlapping when the alignment score reaches it.
pub const DEFAULT_XI_THRESHOLD: f32 = 0.5;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("similarity matrix needs non-empty scenes on both sides")]
    EmptyScene,
    #[error("ground-truth id {0} is not a row of the similarity matrix")]
    UnknownGroundTruthId(u64),
    #[error("match set is not injective: id {0} appears twice")]
    NonInjectiveMatches(u64),
    #[error("empty pair list")]
    EmptyPairList,
    #[error("match references unknown node id {0}")]
    UnknownMatchId(u64),
}

/// Pairwise node similarities in [0, 1]: cosine mapped through (c + 1) / 2.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub row_ids: Vec<u64>,
    pub col_ids: Vec<u64>,
    /// Row-major, `row_ids.len() x col_ids.len()`.
    pub values: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.col_ids.len() + col]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.row_ids.len(), self.col_ids.len())
    }
}

/// Cosine of the joint embeddings mapped into [0, 1].
pub fn similarity_matrix(
    a: &NodeEmbeddingSet,
    b: &NodeEmbeddingSet,
) -> Result<SimilarityMatrix, AlignError> {
    if a.is_empty() || b.is_empty() {
        return Err(AlignError::EmptyScene);
    }
    let n1 = a.len();
    let n2 = b.len();
    let mut values = vec![0.0f32; n1 * n2];
    for i in 0..n1 {
        for j in 0..n2 {
            let dot: f32 = a.joint[i].iter().zip(&b.joint[j]).map(|(x, y)| x * y).sum();
            values[i * n2 + j] = ((dot + 1.0) * 0.5).clamp(0.0, 1.0);
        }
    }
    Ok(SimilarityMatrix {
        row_ids: a.node_ids.clone(),
        col_ids: b.node_ids.clone(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchPair {
    pub src: u64,
    pub dst: u64,
    pub score: f32,
}

/// One-to-one matches; injective both ways, every score at or above the
/// acceptance threshold.
#[derive(Debug, Clone, Default)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn assert_invariants(&self, threshold: f32) {
        let mut src_seen = BTreeSet::new();
        let mut dst_seen = BTreeSet::new();
        for p in &self.pairs {
            assert!(src_seen.insert(p.src), "duplicate source id {}", p.src);
            assert!(dst_seen.insert(p.dst), "duplicate target id {}", p.dst);
            assert!(
                p.score >= threshold,
                "accepted score {} below threshold {threshold}",
                p.score
            );
        }
    }
}

/// Greedy mutual-best matching: repeatedly accept the globally best entry
/// at or above `threshold`, removing its row and column. Ties break to the
/// lower row id, then the lower column id.
pub fn match_nodes(s: &SimilarityMatrix, threshold: f32) -> MatchSet {
    let (n1, n2) = s.shape();
    let mut entries: Vec<(f32, u64, u64)> = Vec::with_capacity(n1 * n2);
    for i in 0..n1 {
        for j in 0..n2 {
            let v = s.at(i, j);
            if v >= threshold {
                entries.push((v, s.row_ids[i], s.col_ids[j]));
            }
        }
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("similarities are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used_rows = BTreeSet::new();
    let mut used_cols = BTreeSet::new();
    let mut pairs = Vec::new();
    for (score, src, dst) in entries {
        if used_rows.contains(&src) || used_cols.contains(&dst) {
            continue;
        }
        used_rows.insert(src);
        used_cols.insert(dst);
        pairs.push(MatchPair { src, dst, score });
    }
    let set = MatchSet { pairs };
    set.assert_invariants(threshold);
    set
}

/// Rank of the true match in its row under descending similarity; ties are
/// pessimistic (the true match ranks last among equal scores).
fn rank_of(s: &SimilarityMatrix, row: usize, true_col: usize) -> usize {
    let (_, n2) = s.shape();
    let target = s.at(row, true_col);
    let mut rank = 1usize;
    for j in 0..n2 {
        if j == true_col {
            continue;
        }
        if s.at(row, j) >= target {
            rank += 1;
        }
    }
    rank
}

fn gt_ranks(s: &SimilarityMatrix, ground_truth: &[(u64, u64)]) -> Result<Vec<usize>, AlignError> {
    let row_index: BTreeMap<u64, usize> =
        s.row_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let col_index: BTreeMap<u64, usize> =
        s.col_ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();
    ground_truth
        .iter()
        .map(|&(src, dst)| {
            let &row = row_index
                .get(&src)
                .ok_or(AlignError::UnknownGroundTruthId(src))?;
            let &col = col_index
                .get(&dst)
                .ok_or(AlignError::UnknownGroundTruthId(dst))?;
            Ok(rank_of(s, row, col))
        })
        .collect()
}

/// Mean reciprocal rank of the true matches.
pub fn mean_rr(s: &SimilarityMatrix, ground_truth: &[(u64, u64)]) -> Result<f32, AlignError> {
    let ranks = gt_ranks(s, ground_truth)?;
    if ranks.is_empty() {
        return Ok(0.0);
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f32).sum::<f32>() / ranks.len() as f32)
}

/// Fraction of true matches ranked within the top `k`.
pub fn hits_at_k(
    s: &SimilarityMatrix,
    ground_truth: &[(u64, u64)],
    k: usize,
) -> Result<f32, AlignError> {
    let ranks = gt_ranks(s, ground_truth)?;
    if ranks.is_empty() {
        return Ok(0.0);
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f32 / ranks.len() as f32)
}

/// Scene-level alignment score: the fraction of the smaller scene's nodes
/// confidently matched.
pub fn alignment_score(s: &SimilarityMatrix, threshold: f32) -> f32 {
    let (n1, n2) = s.shape();
    let denom = n1.min(n2);
    if denom == 0 {
        return 0.0;
    }
    match_nodes(s, threshold).len() as f32 / denom as f32
}

/// Node-matching metrics; precision/recall/F1 are filled by overlap suites.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub mean_rr: f32,
    pub hits_at_1: f32,
    pub hits_at_3: f32,
    pub hits_at_5: f32,
    pub precision: Option<f32>,
    pub recall: Option<f32>,
    pub f1: Option<f32>,
}

impl EvalReport {
    pub fn assert_invariants(&self) {
        assert!(self.hits_at_1 <= self.hits_at_3 + 1e-6);
        assert!(self.hits_at_3 <= self.hits_at_5 + 1e-6);
        assert!(self.mean_rr >= self.hits_at_1 - 1e-6);
        assert!(self.mean_rr <= 1.0 + 1e-6);
    }

    /// "metric,value" CSV rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("mean_rr,{:.6}\n", self.mean_rr));
        out.push_str(&format!("hits@1,{:.6}\n", self.hits_at_1));
        out.push_str(&format!("hits@3,{:.6}\n", self.hits_at_3));
        out.push_str(&format!("hits@5,{:.6}\n", self.hits_at_5));
        if let Some(p) = self.precision {
            out.push_str(&format!("precision,{p:.6}\n"));
        }
        if let Some(r) = self.recall {
            out.push_str(&format!("recall,{r:.6}\n"));
        }
        if let Some(f) = self.f1 {
            out.push_str(&format!("f1,{f:.6}\n"));
        }
        out
    }
}

/// Precision/recall/F1 of classifying pairs as overlapping via
/// `xi >= xi_threshold`, over (alignment score, is-overlapping) labels.
pub fn overlap_check(labeled: &[(f32, bool)], xi_threshold: f32) -> Result<EvalReport, AlignError> {
    if labeled.is_empty() {
        return Err(AlignError::EmptyPairList);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for &(xi, overlapping) in labeled {
        let predicted = xi >= xi_threshold;
        match (predicted, overlapping) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f32 / (tp + fp) as f32
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f32 / (tp + fn_) as f32
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(EvalReport {
        precision: Some(precision),
        recall: Some(recall),
        f1: Some(f1),
        ..EvalReport::default()
    })
}

/// Rigid transform (rotation + translation) as a row-major 4x4 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform(pub [[f32; 4]; 4]);

impl RigidTransform {
    pub fn identity() -> Self {
        let mut m = [[0.0f32; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        RigidTransform(m)
    }

    pub fn apply(&self, p: &[f32; 3]) -> [f32; 3] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Inverse of a rigid transform: transpose the rotation, negate-rotate
    /// the translation.
    pub fn inverse(&self) -> RigidTransform {
        let m = &self.0;
        let mut inv = [[0.0f32; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = m[j][i];
            }
        }
        for (i, row) in inv.iter_mut().take(3).enumerate() {
            row[3] = -(m[0][i] * m[0][3] + m[1][i] * m[1][3] + m[2][i] * m[2][3]);
        }
        inv[3][3] = 1.0;
        RigidTransform(inv)
    }

    pub fn flat(&self) -> [f32; 16] {
        let mut out = [0.0f32; 16];
        for i in 0..4 {
            for j in 0..4 {
                out[i * 4 + j] = self.0[i][j];
            }
        }
        out
    }

    pub fn from_flat(flat: &[f32]) -> Self {
        assert_eq!(flat.len(), 16, "rigid transform needs 16 entries");
        let mut m = [[0.0f32; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = flat[i * 4 + j];
            }
        }
        RigidTransform(m)
    }

    pub fn is_identity(&self) -> bool {
        let id = RigidTransform::identity();
        self.0
            .iter()
            .flatten()
            .zip(id.0.iter().flatten())
            .all(|(a, b)| (a - b).abs() < 1e-6)
    }
}

/// Where a unified node came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    FromFirst(u64),
    FromSecond(u64),
    Merged(u64, u64),
}

/// Node of the merged graph: matched pairs carry the union of both sides'
/// payloads, meshes kept as a set.
#[derive(Debug, Clone)]
pub struct UnifiedNode {
    pub id: u64,
    pub labels: Vec<String>,
    pub points: Vec<[f32; 3]>,
    pub meshes: Vec<TriMesh>,
    pub captions: Vec<String>,
    pub referrals: Vec<String>,
    pub bbox: Aabb,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct UnifiedGraph {
    pub nodes: Vec<UnifiedNode>,
    pub edges: Vec<Edge>,
}

impl UnifiedGraph {
    /// Flatten into a plain scene graph (meshes concatenated, captions
    /// joined); provenance is dropped.
    pub fn to_scene_graph(&self) -> SceneGraph {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let mesh = if n.meshes.is_empty() {
                    None
                } else {
                    let mut vertices = Vec::new();
                    let mut faces = Vec::new();
                    for m in &n.meshes {
                        let off = vertices.len() as u32;
                        vertices.extend_from_slice(&m.vertices);
                        faces.extend(m.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
                    }
                    Some(TriMesh { vertices, faces })
                };
                ObjectNode {
                    id: n.id,
                    label: n.labels.first().cloned(),
                    points: n.points.clone(),
                    mesh,
                    caption: if n.captions.is_empty() {
                        None
                    } else {
                        Some(n.captions.join(" | "))
                    },
                    referrals: n.referrals.clone(),
                    bbox: n.bbox,
                    text_embedding: None,
                    referral_embeddings: None,
                }
            })
            .collect();
        SceneGraph {
            nodes,
            edges: self.edges.clone(),
        }
    }
}

fn push_unique(list: &mut Vec<String>, item: &str) {
    if !list.iter().any(|x| x == item) {
        list.push(item.to_string());
    }
}

/// Merge two scene graphs under a match set. Matched pairs become one node
/// with both payloads (the second graph's geometry is mapped into the first
/// graph's frame when `transform` carries the relative rigid transform of
/// graph 2, i.e. points are pulled back through its inverse). Unmatched
/// nodes keep their original connectivity; duplicate edges collapse.
pub fn build_unified_graph(
    g1: &SceneGraph,
    g2: &SceneGraph,
    matches: &MatchSet,
    transform_of_g2: Option<&RigidTransform>,
) -> Result<UnifiedGraph, AlignError> {
    let idx1 = g1.node_index();
    let idx2 = g2.node_index();
    let mut matched_src = BTreeSet::new();
    let mut matched_dst = BTreeSet::new();
    for p in &matches.pairs {
        if !idx1.contains_key(&p.src) {
            return Err(AlignError::UnknownMatchId(p.src));
        }
        if !idx2.contains_key(&p.dst) {
            return Err(AlignError::UnknownMatchId(p.dst));
        }
        if !matched_src.insert(p.src) {
            return Err(AlignError::NonInjectiveMatches(p.src));
        }
        if !matched_dst.insert(p.dst) {
            return Err(AlignError::NonInjectiveMatches(p.dst));
        }
    }

    let pullback = transform_of_g2.map(RigidTransform::inverse);
    let map_point = |p: &[f32; 3]| -> [f32; 3] {
        match &pullback {
            Some(t) => t.apply(p),
            None => *p,
        }
    };

    let mut nodes = Vec::new();
    let mut id1_to_unified: BTreeMap<u64, u64> = BTreeMap::new();
    let mut id2_to_unified: BTreeMap<u64, u64> = BTreeMap::new();
    let mut next_id = 0u64;

    let base_node = |node: &ObjectNode, provenance: Provenance, id: u64, map_geo: bool| {
        let points: Vec<[f32; 3]> = if map_geo {
            node.points.iter().map(&map_point).collect()
        } else {
            node.points.clone()
        };
        let meshes: Vec<TriMesh> = node
            .mesh
            .iter()
            .map(|m| {
                if map_geo {
                    TriMesh {
                        vertices: m.vertices.iter().map(&map_point).collect(),
                        faces: m.faces.clone(),
                    }
                } else {
                    m.clone()
                }
            })
            .collect();
        let bbox = Aabb::from_points(&points).unwrap_or(node.bbox);
        UnifiedNode {
            id,
            labels: node.label.iter().cloned().collect(),
            points,
            meshes,
            captions: node.caption.iter().cloned().collect(),
            referrals: node.referrals.clone(),
            bbox,
            provenance,
        }
    };

    // merged nodes first, in match order
    for p in &matches.pairs {
        let n1 = &g1.nodes[idx1[&p.src]];
        let n2 = &g2.nodes[idx2[&p.dst]];
        let mut merged = base_node(n1, Provenance::Merged(p.src, p.dst), next_id, false);
        merged.points.extend(n2.points.iter().map(&map_point));
        if let Some(m) = &n2.mesh {
            merged.meshes.push(if pullback.is_some() {
                TriMesh {
                    vertices: m.vertices.iter().map(&map_point).collect(),
                    faces: m.faces.clone(),
                }
            } else {
                m.clone()
            });
        }
        if let Some(l) = &n2.label {
            push_unique(&mut merged.labels, l);
        }
        if let Some(c) = &n2.caption {
            push_unique(&mut merged.captions, c);
        }
        for r in &n2.referrals {
            push_unique(&mut merged.referrals, r);
        }
        if !merged.points.is_empty() {
            merged.bbox = Aabb::from_points(&merged.points).expect("non-empty");
        }
        id1_to_unified.insert(p.src, next_id);
        id2_to_unified.insert(p.dst, next_id);
        nodes.push(merged);
        next_id += 1;
    }
    for n in &g1.nodes {
        if !matched_src.contains(&n.id) {
            id1_to_unified.insert(n.id, next_id);
            nodes.push(base_node(n, Provenance::FromFirst(n.id), next_id, false));
            next_id += 1;
        }
    }
    for n in &g2.nodes {
        if !matched_dst.contains(&n.id) {
            id2_to_unified.insert(n.id, next_id);
            nodes.push(base_node(n, Provenance::FromSecond(n.id), next_id, true));
            next_id += 1;
        }
    }

    let mut edges = Vec::new();
    let mut seen = BTreeSet::new();
    for (edge_list, map) in [(&g1.edges, &id1_to_unified), (&g2.edges, &id2_to_unified)] {
        for e in edge_list {
            let src = map[&e.src];
            let dst = map[&e.dst];
            if src == dst {
                continue; // both endpoints merged into one node
            }
            if seen.insert((src, dst, e.predicate.clone())) {
                edges.push(Edge {
                    src,
                    dst,
                    predicate: e.predicate.clone(),
                });
            }
        }
    }

    Ok(UnifiedGraph { nodes, edges })
}
