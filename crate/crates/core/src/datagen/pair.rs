//! Sub-scan pair extraction with controlled object overlap and a random
//! rigid transform between the two fragments.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::DatagenError;
use crate::alignment::RigidTransform;
use crate::numerics::seeded_rng;
use crate::scenegraph::{Aabb, Edge, SceneGraph};

/// Two sub-scans of one scene with ground-truth correspondences, the true
/// object overlap ratio, and the rigid transform applied to the second.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub g1: SceneGraph,
    pub g2: SceneGraph,
    /// (g1 node id, g2 node id) for every shared object.
    pub gt_matches: Vec<(u64, u64)>,
    /// |shared| / |union| over object sets.
    pub overlap_ratio: f32,
    pub transform: RigidTransform,
}

impl ScenePair {
    /// Recompute |shared| / |union| from the ground-truth matches.
    pub fn recomputed_overlap(&self) -> f32 {
        let shared = self.gt_matches.len();
        let union = self.g1.nodes.len() + self.g2.nodes.len() - shared;
        if union == 0 {
            0.0
        } else {
            shared as f32 / union as f32
        }
    }
}

/// Rotation uniform over SO(3) (Shoemake's quaternion method) plus a
/// translation uniform in a cube of half-side `translation_range`.
pub fn random_rigid_transform(rng: &mut ChaCha8Rng, translation_range: f32) -> RigidTransform {
    let u1: f32 = rng.random_range(0.0f32..1.0);
    let u2: f32 = rng.random_range(0.0f32..1.0);
    let u3: f32 = rng.random_range(0.0f32..1.0);
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (s2, c2) = (std::f32::consts::TAU * u2).sin_cos();
    let (s3, c3) = (std::f32::consts::TAU * u3).sin_cos();
    let (x, y, z, w) = (a * s2, a * c2, b * s3, b * c3);

    let mut m = [[0.0f32; 4]; 4];
    m[0][0] = 1.0 - 2.0 * (y * y + z * z);
    m[0][1] = 2.0 * (x * y - z * w);
    m[0][2] = 2.0 * (x * z + y * w);
    m[1][0] = 2.0 * (x * y + z * w);
    m[1][1] = 1.0 - 2.0 * (x * x + z * z);
    m[1][2] = 2.0 * (y * z - x * w);
    m[2][0] = 2.0 * (x * z - y * w);
    m[2][1] = 2.0 * (y * z + x * w);
    m[2][2] = 1.0 - 2.0 * (x * x + y * y);
    for (i, row) in m.iter_mut().take(3).enumerate() {
        let _ = i;
        row[3] = rng.random_range(-translation_range..translation_range);
    }
    m[3][3] = 1.0;
    RigidTransform(m)
}

/// Apply a rigid transform to all node geometry, recomputing bounding boxes
/// from the transformed points.
pub fn transform_scene(graph: &mut SceneGraph, t: &RigidTransform) {
    for node in graph.nodes.iter_mut() {
        for p in node.points.iter_mut() {
            *p = t.apply(p);
        }
        if let Some(mesh) = &mut node.mesh {
            for v in mesh.vertices.iter_mut() {
                *v = t.apply(v);
            }
        }
        if !node.points.is_empty() {
            node.bbox = Aabb::from_points(&node.points).expect("non-empty");
        } else {
            // no points: transform the box corners and refit
            let corners = bbox_corners(&node.bbox);
            let moved: Vec<[f32; 3]> = corners.iter().map(|c| t.apply(c)).collect();
            node.bbox = Aabb::from_points(&moved).expect("eight corners");
        }
    }
}

fn bbox_corners(b: &Aabb) -> Vec<[f32; 3]> {
    let lo = b.min();
    let hi = b.max();
    let mut out = Vec::with_capacity(8);
    for xi in [lo[0], hi[0]] {
        for yi in [lo[1], hi[1]] {
            for zi in [lo[2], hi[2]] {
                out.push([xi, yi, zi]);
            }
        }
    }
    out
}

/// Best (shared, exclusive) sizes approximating the target object IoU.
fn subset_sizes(n: usize, target: f32) -> Option<(usize, usize)> {
    let mut best: Option<(f32, usize, usize)> = None;
    for s in 1..=n {
        let e_exact = s as f32 * (1.0 - target) / target;
        for e in [e_exact.floor() as usize, e_exact.ceil() as usize] {
            if s + e > n {
                continue;
            }
            let ratio = s as f32 / (s + e) as f32;
            let err = (ratio - target).abs();
            let better = match best {
                None => true,
                Some((berr, bs, be)) => {
                    err < berr - 1e-6
                        || ((err - berr).abs() <= 1e-6 && s + e > bs + be)
                }
            };
            if better {
                best = Some((err, s, e));
            }
        }
    }
    best.and_then(|(err, s, e)| if err <= 0.05 { Some((s, e)) } else { None })
}

fn induce_subgraph(scene: &SceneGraph, keep: &[u64], rng: &mut ChaCha8Rng) -> (SceneGraph, Vec<(u64, u64)>) {
    // new compact ids in a shuffled order
    let mut order: Vec<u64> = keep.to_vec();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let remap: std::collections::BTreeMap<u64, u64> = order
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new as u64))
        .collect();
    let idx = scene.node_index();
    let mut nodes = Vec::with_capacity(order.len());
    for &old in &order {
        let mut node = scene.nodes[idx[&old]].clone();
        node.id = remap[&old];
        nodes.push(node);
    }
    let edges = scene
        .edges
        .iter()
        .filter(|e| remap.contains_key(&e.src) && remap.contains_key(&e.dst))
        .map(|e| Edge {
            src: remap[&e.src],
            dst: remap[&e.dst],
            predicate: e.predicate.clone(),
        })
        .collect();
    let mapping: Vec<(u64, u64)> = remap.iter().map(|(&old, &new)| (old, new)).collect();
    (SceneGraph { nodes, edges }, mapping)
}

/// Extract two overlapping sub-scans: shared objects plus per-side
/// exclusive sets (randomly split, so fragment sizes are naturally
/// asymmetric), with a random rigid transform applied to the second
/// fragment's geometry.
pub fn make_pair(
    scene: &SceneGraph,
    target_overlap: f32,
    seed: u64,
    identity_transform: bool,
) -> Result<ScenePair, DatagenError> {
    if !(0.1..=0.9).contains(&target_overlap) {
        return Err(DatagenError::OverlapOutOfRange(target_overlap));
    }
    let n = scene.nodes.len();
    let mut rng = seeded_rng(seed, 0x7061_6972);
    let Some((s, e_total)) = subset_sizes(n, target_overlap) else {
        return Err(DatagenError::UnattainableOverlap {
            target: target_overlap,
            scene_size: n,
        });
    };

    let mut ids: Vec<u64> = scene.nodes.iter().map(|n| n.id).collect();
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let rho: f32 = rng.random_range(0.0f32..=1.0);
    let e1 = ((e_total as f32) * rho).round() as usize;
    let e2 = e_total - e1;

    let shared: Vec<u64> = ids[0..s].to_vec();
    let only1: Vec<u64> = ids[s..s + e1].to_vec();
    let only2: Vec<u64> = ids[s + e1..s + e1 + e2].to_vec();

    let mut keep1 = shared.clone();
    keep1.extend(&only1);
    let mut keep2 = shared.clone();
    keep2.extend(&only2);

    let (g1, map1) = induce_subgraph(scene, &keep1, &mut rng);
    let (mut g2, map2) = induce_subgraph(scene, &keep2, &mut rng);

    let transform = if identity_transform {
        RigidTransform::identity()
    } else {
        random_rigid_transform(&mut rng, 5.0)
    };
    if !transform.is_identity() {
        transform_scene(&mut g2, &transform);
    }

    let lookup1: std::collections::BTreeMap<u64, u64> = map1.into_iter().collect();
    let lookup2: std::collections::BTreeMap<u64, u64> = map2.into_iter().collect();
    let mut gt_matches: Vec<(u64, u64)> = shared
        .iter()
        .map(|old| (lookup1[old], lookup2[old]))
        .collect();
    gt_matches.sort_unstable();

    let overlap_ratio = s as f32 / (s + e_total) as f32;
    Ok(ScenePair {
        g1,
        g2,
        gt_matches,
        overlap_ratio,
        transform,
    })
}

/// Pull the second fragment back into the first fragment's frame (the
/// T = I4 evaluation setting for corpora generated with random transforms).
pub fn undo_transform(pair: &ScenePair) -> ScenePair {
    let mut out = pair.clone();
    if !pair.transform.is_identity() {
        let inv = pair.transform.inverse();
        transform_scene(&mut out.g2, &inv);
        out.transform = RigidTransform::identity();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scene, SyntheticSceneConfig};

    fn scene(seed: u64, min_objects: usize) -> SceneGraph {
        let config = SyntheticSceneConfig {
            object_count: (min_objects, min_objects + 4),
            points_per_object: 60,
            ..SyntheticSceneConfig::default()
        };
        generate_scene(&config, seed).unwrap()
    }

    #[test]
    fn high_overlap_target_is_met_within_tolerance() {
        let sc = scene(1, 16);
        let pair = make_pair(&sc, 0.9, 3, false).unwrap();
        assert!(
            (pair.overlap_ratio - 0.9).abs() <= 0.05,
            "overlap {}",
            pair.overlap_ratio
        );
        assert!(pair.recomputed_overlap() == pair.overlap_ratio);
    }

    #[test]
    fn exact_overlap_on_divisible_counts() {
        // 12 objects, target 0.5: s=4, e=4 gives exactly 4/8
        let sc = scene(2, 12);
        let pair = make_pair(&sc, 0.5, 5, false).unwrap();
        // oracle: the recomputed ratio equals the declared one exactly
        assert_eq!(pair.overlap_ratio, pair.recomputed_overlap());
        assert!((pair.overlap_ratio - 0.5).abs() <= 0.05);
    }

    #[test]
    fn identity_transform_mode_keeps_geometry() {
        let sc = scene(3, 10);
        let pair = make_pair(&sc, 0.5, 7, true).unwrap();
        assert!(pair.transform.is_identity());
        // shared nodes carry identical points in both fragments
        let (a, b) = pair.gt_matches[0];
        let n1 = pair.g1.node(a).unwrap();
        let n2 = pair.g2.node(b).unwrap();
        assert_eq!(n1.points, n2.points);
    }

    #[test]
    fn matched_geometry_agrees_up_to_the_recorded_transform() {
        let sc = scene(4, 10);
        let pair = make_pair(&sc, 0.6, 11, false).unwrap();
        assert!(!pair.transform.is_identity());
        for &(a, b) in &pair.gt_matches {
            let n1 = pair.g1.node(a).unwrap();
            let n2 = pair.g2.node(b).unwrap();
            assert_eq!(n1.points.len(), n2.points.len());
            for (p, q) in n1.points.iter().zip(&n2.points) {
                let moved = pair.transform.apply(p);
                for c in 0..3 {
                    assert!(
                        (moved[c] - q[c]).abs() < 1e-4,
                        "transform mismatch: {moved:?} vs {q:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn gt_matches_are_a_bijection() {
        let sc = scene(5, 14);
        let pair = make_pair(&sc, 0.3, 13, false).unwrap();
        let mut lhs: Vec<u64> = pair.gt_matches.iter().map(|m| m.0).collect();
        let mut rhs: Vec<u64> = pair.gt_matches.iter().map(|m| m.1).collect();
        let n = lhs.len();
        lhs.sort_unstable();
        lhs.dedup();
        rhs.sort_unstable();
        rhs.dedup();
        assert_eq!(lhs.len(), n);
        assert_eq!(rhs.len(), n);
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let sc = scene(6, 10);
        assert!(matches!(
            make_pair(&sc, 0.05, 1, false),
            Err(DatagenError::OverlapOutOfRange(_))
        ));
        assert!(matches!(
            make_pair(&sc, 0.95, 1, false),
            Err(DatagenError::OverlapOutOfRange(_))
        ));
    }

    #[test]
    fn undo_transform_restores_shared_geometry() {
        let sc = scene(7, 10);
        let pair = make_pair(&sc, 0.5, 17, false).unwrap();
        let restored = undo_transform(&pair);
        let (a, b) = restored.gt_matches[0];
        let n1 = restored.g1.node(a).unwrap();
        let n2 = restored.g2.node(b).unwrap();
        for (p, q) in n1.points.iter().zip(&n2.points) {
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn subgraph_edges_survive_when_both_endpoints_kept() {
        let sc = scene(8, 14);
        let pair = make_pair(&sc, 0.8, 19, true).unwrap();
        // every edge in g1 references nodes of g1
        let ids: std::collections::BTreeSet<u64> =
            pair.g1.nodes.iter().map(|n| n.id).collect();
        for e in &pair.g1.edges {
            assert!(ids.contains(&e.src) && ids.contains(&e.dst));
        }
        assert!(pair.g1.validate().is_ok());
        assert!(pair.g2.validate().is_ok());
    }
}
