//! Segmentation-noise simulation: over/under-segmentation, point dropout,
//! extra sensor noise, text and edge dropout, with ground-truth matches
//! re-derived by bounding-box annotation propagation.

use std::collections::BTreeMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::pair::ScenePair;
use crate::numerics::seeded_rng;
use crate::scenegraph::{Aabb, Edge, ObjectNode, SceneGraph};

#[derive(Debug, Clone)]
pub struct NoiseConfig {
    /// Chance to split a node's points by a random plane.
    pub p_split: f32,
    /// Chance to merge a node into its nearest neighbor.
    pub p_merge: f32,
    /// Fraction of points dropped uniformly.
    pub point_dropout: f32,
    /// Extra Gaussian noise on every surviving point, meters.
    pub extra_noise_sigma: f32,
    /// Chance to drop the caption, and each referral independently.
    pub text_dropout: f32,
    pub edge_dropout: f32,
    pub min_points_per_fragment: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            p_split: 0.2,
            p_merge: 0.1,
            point_dropout: 0.2,
            extra_noise_sigma: 0.02,
            text_dropout: 0.3,
            edge_dropout: 0.2,
            min_points_per_fragment: 8,
        }
    }
}

impl NoiseConfig {
    /// All probabilities zero, no noise: the identity configuration.
    pub fn none() -> Self {
        Self {
            p_split: 0.0,
            p_merge: 0.0,
            point_dropout: 0.0,
            extra_noise_sigma: 0.0,
            text_dropout: 0.0,
            edge_dropout: 0.0,
            min_points_per_fragment: 8,
        }
    }
}

fn sample_gaussian(rng: &mut ChaCha8Rng, sigma: f32) -> f32 {
    if sigma == 0.0 {
        return 0.0;
    }
    let u1: f32 = rng.random_range(1e-7f32..1.0);
    let u2: f32 = rng.random_range(0.0f32..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

fn refit_bbox(node: &mut ObjectNode) {
    if let Some(bb) = Aabb::from_points(&node.points) {
        node.bbox = bb;
    }
}

/// Assign each predicted node the ground-truth node maximizing bounding-box
/// IoU, provided IoU >= 0.25; ties break to the lower ground-truth id.
/// Both graphs must share one coordinate frame.
pub fn propagate_annotations(gt: &SceneGraph, pred: &SceneGraph) -> BTreeMap<u64, u64> {
    let mut map = BTreeMap::new();
    for p in &pred.nodes {
        let mut best: Option<(f32, u64)> = None;
        for g in &gt.nodes {
            let iou = p.bbox.iou(&g.bbox);
            if iou < 0.25 {
                continue;
            }
            let better = match best {
                None => true,
                Some((biou, bid)) => iou > biou || (iou == biou && g.id < bid),
            };
            if better {
                best = Some((iou, g.id));
            }
        }
        if let Some((_, gid)) = best {
            map.insert(p.id, gid);
        }
    }
    map
}

/// For each ground-truth node, its best-overlapping predicted fragment.
fn best_fragments(gt: &SceneGraph, pred: &SceneGraph) -> BTreeMap<u64, u64> {
    let assignment = propagate_annotations(gt, pred);
    let gt_idx = gt.node_index();
    let pred_idx = pred.node_index();
    let mut best: BTreeMap<u64, (f32, u64)> = BTreeMap::new();
    for (&pid, &gid) in &assignment {
        let iou = pred.nodes[pred_idx[&pid]]
            .bbox
            .iou(&gt.nodes[gt_idx[&gid]].bbox);
        let better = match best.get(&gid) {
            None => true,
            Some(&(biou, bpid)) => iou > biou || (iou == biou && pid < bpid),
        };
        if better {
            best.insert(gid, (iou, pid));
        }
    }
    best.into_iter().map(|(gid, (_, pid))| (gid, pid)).collect()
}

fn noisy_scene(scene: &SceneGraph, noise: &NoiseConfig, rng: &mut ChaCha8Rng) -> SceneGraph {
    let mut nodes: Vec<ObjectNode> = scene.nodes.clone();
    let mut edges: Vec<Edge> = scene.edges.clone();
    let mut next_id = nodes.iter().map(|n| n.id).max().unwrap_or(0) + 1;

    // over-segmentation: split by a random plane through the centroid
    let mut split_products = Vec::new();
    for node in nodes.iter_mut() {
        if rng.random_range(0.0f32..1.0) >= noise.p_split {
            continue;
        }
        if node.points.len() < 2 * noise.min_points_per_fragment {
            continue;
        }
        let normal = {
            let x = sample_gaussian(rng, 1.0) + 1e-4;
            let y = sample_gaussian(rng, 1.0);
            let z = sample_gaussian(rng, 1.0);
            let n = (x * x + y * y + z * z).sqrt();
            [x / n, y / n, z / n]
        };
        let c = node.bbox.centroid;
        let (mut a_pts, mut b_pts) = (Vec::new(), Vec::new());
        for p in &node.points {
            let side = (p[0] - c[0]) * normal[0] + (p[1] - c[1]) * normal[1] + (p[2] - c[2]) * normal[2];
            if side >= 0.0 {
                a_pts.push(*p);
            } else {
                b_pts.push(*p);
            }
        }
        if a_pts.len() < noise.min_points_per_fragment || b_pts.len() < noise.min_points_per_fragment {
            continue;
        }
        // the larger fragment keeps the node id and the mesh
        let (keep, spawn) = if a_pts.len() >= b_pts.len() {
            (a_pts, b_pts)
        } else {
            (b_pts, a_pts)
        };
        node.points = keep;
        refit_bbox(node);
        let mut fragment = ObjectNode {
            id: next_id,
            label: node.label.clone(),
            points: spawn,
            mesh: None,
            caption: node.caption.clone(),
            referrals: node.referrals.clone(),
            bbox: node.bbox,
            text_embedding: None,
            referral_embeddings: None,
        };
        refit_bbox(&mut fragment);
        split_products.push(fragment);
        next_id += 1;
    }
    nodes.extend(split_products);

    // under-segmentation: merge into the nearest neighbor
    let mut merged_away: Vec<u64> = Vec::new();
    let snapshot_ids: Vec<u64> = nodes.iter().map(|n| n.id).collect();
    for id in snapshot_ids {
        if merged_away.contains(&id) || nodes.len() - merged_away.len() < 2 {
            continue;
        }
        if rng.random_range(0.0f32..1.0) >= noise.p_merge {
            continue;
        }
        let pos = nodes.iter().position(|n| n.id == id).expect("id present");
        let centroid = nodes[pos].bbox.centroid;
        let nearest = nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| *i != pos && !merged_away.contains(&n.id))
            .min_by(|(_, a), (_, b)| {
                let da = dist2(&a.bbox.centroid, &centroid);
                let db = dist2(&b.bbox.centroid, &centroid);
                da.partial_cmp(&db).expect("finite").then(a.id.cmp(&b.id))
            })
            .map(|(i, _)| i);
        let Some(other_pos) = nearest else { continue };
        let other = nodes[other_pos].clone();
        let target = &mut nodes[pos];
        target.points.extend(other.points.iter().copied());
        if let (Some(m1), Some(m2)) = (&mut target.mesh, &other.mesh) {
            let off = m1.vertices.len() as u32;
            m1.vertices.extend_from_slice(&m2.vertices);
            m1.faces
                .extend(m2.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
        } else if target.mesh.is_none() {
            target.mesh = other.mesh.clone();
        }
        if target.caption.is_none() {
            target.caption = other.caption.clone();
        }
        for r in &other.referrals {
            if !target.referrals.contains(r) {
                target.referrals.push(r.clone());
            }
        }
        refit_bbox(target);
        merged_away.push(other.id);
        for e in edges.iter_mut() {
            if e.src == other.id {
                e.src = id;
            }
            if e.dst == other.id {
                e.dst = id;
            }
        }
    }
    nodes.retain(|n| !merged_away.contains(&n.id));
    edges.retain(|e| e.src != e.dst);
    edges.dedup();

    // point dropout, extra noise
    for node in nodes.iter_mut() {
        if noise.point_dropout > 0.0 && node.points.len() > noise.min_points_per_fragment {
            let kept: Vec<[f32; 3]> = node
                .points
                .iter()
                .filter(|_| rng.random_range(0.0f32..1.0) >= noise.point_dropout)
                .copied()
                .collect();
            if kept.len() >= noise.min_points_per_fragment {
                node.points = kept;
            }
        }
        if noise.extra_noise_sigma > 0.0 {
            for p in node.points.iter_mut() {
                for c in p.iter_mut() {
                    *c += sample_gaussian(rng, noise.extra_noise_sigma);
                }
            }
        }
        refit_bbox(node);
    }

    // text dropout: points always remain, so payloads never empty out
    for node in nodes.iter_mut() {
        if node.caption.is_some() && rng.random_range(0.0f32..1.0) < noise.text_dropout {
            node.caption = None;
        }
        if !node.referrals.is_empty() {
            node.referrals
                .retain(|_| rng.random_range(0.0f32..1.0) >= noise.text_dropout);
        }
    }

    // edge dropout
    edges.retain(|_| rng.random_range(0.0f32..1.0) >= noise.edge_dropout);
    let ids: std::collections::BTreeSet<u64> = nodes.iter().map(|n| n.id).collect();
    edges.retain(|e| ids.contains(&e.src) && ids.contains(&e.dst));

    SceneGraph { nodes, edges }
}

fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Degrade both fragments of a pair into predicted-style data. Ground-truth
/// matches are re-derived by propagating annotations from the clean scenes
/// to the best-overlapping predicted fragments, so they stay one-to-one.
/// The stored overlap ratio keeps the construction-time label.
pub fn simulate_predicted(pair: &ScenePair, noise: &NoiseConfig, seed: u64) -> ScenePair {
    let mut rng = seeded_rng(seed, 0x7072_6564);
    let pred1 = noisy_scene(&pair.g1, noise, &mut rng);
    let pred2 = noisy_scene(&pair.g2, noise, &mut rng);

    let best1 = best_fragments(&pair.g1, &pred1);
    let best2 = best_fragments(&pair.g2, &pred2);
    let mut gt_matches = Vec::new();
    for &(a, b) in &pair.gt_matches {
        if let (Some(&p1), Some(&p2)) = (best1.get(&a), best2.get(&b)) {
            gt_matches.push((p1, p2));
        }
    }
    gt_matches.sort_unstable();

    ScenePair {
        g1: pred1,
        g2: pred2,
        gt_matches,
        overlap_ratio: pair.overlap_ratio,
        transform: pair.transform,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scene, make_pair, SyntheticSceneConfig};

    fn pair(seed: u64) -> ScenePair {
        let config = SyntheticSceneConfig {
            object_count: (10, 14),
            points_per_object: 80,
            ..SyntheticSceneConfig::default()
        };
        let scene = generate_scene(&config, seed).unwrap();
        make_pair(&scene, 0.6, seed ^ 0xbeef, false).unwrap()
    }

    #[test]
    fn zero_noise_is_the_identity() {
        let p = pair(1);
        let out = simulate_predicted(&p, &NoiseConfig::none(), 9);
        assert_eq!(out.g1, p.g1);
        assert_eq!(out.g2, p.g2);
        let mut want = p.gt_matches.clone();
        want.sort_unstable();
        assert_eq!(out.gt_matches, want);
    }

    #[test]
    fn forced_split_partitions_a_single_node() {
        let config = SyntheticSceneConfig {
            object_count: (1, 1),
            points_per_object: 120,
            ..SyntheticSceneConfig::default()
        };
        let scene = generate_scene(&config, 5).unwrap();
        let original_points = scene.nodes[0].points.clone();
        let noise = NoiseConfig {
            p_split: 1.0,
            ..NoiseConfig::none()
        };
        let mut rng = seeded_rng(2, 61);
        let pred = noisy_scene(&scene, &noise, &mut rng);
        assert_eq!(pred.nodes.len(), 2);
        let mut all: Vec<[f32; 3]> = pred
            .nodes
            .iter()
            .flat_map(|n| n.points.iter().copied())
            .collect();
        let mut want = original_points;
        let key = |p: &[f32; 3]| (p[0].to_bits(), p[1].to_bits(), p[2].to_bits());
        all.sort_by_key(key);
        want.sort_by_key(key);
        assert_eq!(all, want, "fragments must partition the original points");
    }

    #[test]
    fn propagation_on_identical_scenes_is_identity_with_full_iou() {
        let p = pair(3);
        let map = propagate_annotations(&p.g1, &p.g1);
        for n in &p.g1.nodes {
            assert_eq!(map.get(&n.id), Some(&n.id));
            assert!((n.bbox.iou(&n.bbox) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn disjoint_boxes_stay_unassigned() {
        let p = pair(4);
        let mut far = p.g1.clone();
        for n in far.nodes.iter_mut() {
            for pt in n.points.iter_mut() {
                pt[0] += 1000.0;
            }
            n.bbox = Aabb::from_points(&n.points).unwrap();
        }
        let map = propagate_annotations(&p.g1, &far);
        assert!(map.is_empty());
    }

    #[test]
    fn propagation_matches_exhaustive_iou_argmax() {
        use rand::RngExt;
        let mut rng = seeded_rng(6, 62);
        for _ in 0..100 {
            let mk_box = |rng: &mut rand_chacha::ChaCha8Rng| -> Aabb {
                Aabb {
                    centroid: [
                        rng.random_range(-2.0f32..2.0),
                        rng.random_range(-2.0f32..2.0),
                        rng.random_range(0.0f32..1.0),
                    ],
                    extent: [
                        rng.random_range(0.3f32..1.0),
                        rng.random_range(0.3f32..1.0),
                        rng.random_range(0.3f32..1.0),
                    ],
                }
            };
            let mk_scene = |boxes: &[Aabb]| -> SceneGraph {
                SceneGraph {
                    nodes: boxes
                        .iter()
                        .enumerate()
                        .map(|(i, b)| ObjectNode {
                            id: i as u64,
                            label: None,
                            points: vec![],
                            mesh: None,
                            caption: Some("x".into()),
                            referrals: vec![],
                            bbox: *b,
                            text_embedding: None,
                            referral_embeddings: None,
                        })
                        .collect(),
                    edges: vec![],
                }
            };
            let gt_boxes: Vec<Aabb> = (0..8).map(|_| mk_box(&mut rng)).collect();
            // jittered copies of the gt boxes
            let pred_boxes: Vec<Aabb> = gt_boxes
                .iter()
                .map(|b| Aabb {
                    centroid: [
                        b.centroid[0] + rng.random_range(-0.2f32..0.2),
                        b.centroid[1] + rng.random_range(-0.2f32..0.2),
                        b.centroid[2] + rng.random_range(-0.2f32..0.2),
                    ],
                    extent: b.extent,
                })
                .collect();
            let gt = mk_scene(&gt_boxes);
            let pred = mk_scene(&pred_boxes);
            let got = propagate_annotations(&gt, &pred);

            for (pi, pb) in pred_boxes.iter().enumerate() {
                let mut best: Option<(f32, u64)> = None;
                for (gi, gb) in gt_boxes.iter().enumerate() {
                    let iou = pb.iou(gb);
                    if iou >= 0.25 {
                        let better = match best {
                            None => true,
                            Some((bi, bid)) => iou > bi || (iou == bi && (gi as u64) < bid),
                        };
                        if better {
                            best = Some((iou, gi as u64));
                        }
                    }
                }
                assert_eq!(got.get(&(pi as u64)).copied(), best.map(|(_, id)| id));
            }
        }
    }

    #[test]
    fn predicted_pairs_keep_valid_bijective_matches() {
        for seed in 0..100u64 {
            let p = pair(seed);
            let out = simulate_predicted(&p, &NoiseConfig::default(), seed ^ 0x55);
            assert!(!out.g1.nodes.is_empty());
            assert!(!out.g2.nodes.is_empty());
            assert!(out.g1.validate().is_ok(), "seed {seed}: g1 invalid");
            assert!(out.g2.validate().is_ok(), "seed {seed}: g2 invalid");
            let ids1: std::collections::BTreeSet<u64> =
                out.g1.nodes.iter().map(|n| n.id).collect();
            let ids2: std::collections::BTreeSet<u64> =
                out.g2.nodes.iter().map(|n| n.id).collect();
            let mut seen1 = std::collections::BTreeSet::new();
            let mut seen2 = std::collections::BTreeSet::new();
            for &(a, b) in &out.gt_matches {
                assert!(ids1.contains(&a) && ids2.contains(&b), "dangling match");
                assert!(seen1.insert(a), "seed {seed}: non-injective on g1");
                assert!(seen2.insert(b), "seed {seed}: non-injective on g2");
            }
        }
    }
}
