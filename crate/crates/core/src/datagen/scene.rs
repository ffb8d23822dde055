//! Synthetic multi-room scene generation: shape placement, point/mesh
//! payloads, templated captions, spatial referrals with rule-based
//! resolution into edges.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::shapes::{box_mesh, composite_mesh, cylinder_mesh, pose_mesh, sphere_mesh, ShapeKind};
use super::DatagenError;
use crate::encoders::sample_mesh_surface;
use crate::numerics::seeded_rng;
use crate::scenegraph::{Aabb, Edge, ObjectNode, SceneGraph};

#[derive(Debug, Clone)]
pub struct SyntheticSceneConfig {
    /// Room side length range, meters.
    pub room_extent: (f32, f32),
    pub object_count: (usize, usize),
    /// Points sampled onto each object's surface.
    pub points_per_object: usize,
    /// Gaussian noise on sampled points, meters.
    pub point_noise_sigma: f32,
    pub referrals_per_object: (usize, usize),
    /// Chance to place an object on top of a stackable one.
    pub stack_probability: f32,
    pub placement_retries: usize,
    pub adjectives: Vec<String>,
    pub materials: Vec<String>,
    pub relations: Vec<String>,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            room_extent: (6.0, 10.0),
            object_count: (9, 14),
            points_per_object: 300,
            point_noise_sigma: 0.005,
            referrals_per_object: (1, 4),
            stack_probability: 0.25,
            placement_retries: 100,
            adjectives: [
                "red", "blue", "green", "white", "black", "yellow", "purple", "orange",
                "brown", "gray", "pink", "beige", "shiny", "matte", "striped", "plain",
                "dark", "pale", "rustic", "modern", "smooth", "rough", "glossy", "faded",
                "painted", "carved", "polished", "worn",
            ]
            .map(String::from)
            .to_vec(),
            materials: [
                "wood", "metal", "plastic", "fabric", "glass", "stone", "leather", "ceramic",
                "rubber", "paper", "concrete", "bamboo", "marble", "steel", "copper",
                "velvet", "wicker", "cork",
            ]
            .map(String::from)
            .to_vec(),
            relations: [
                "left of",
                "right of",
                "in front of",
                "behind",
                "near",
                "standing on",
                "supported by",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let ok = self.room_extent.0 <= self.room_extent.1
            && self.room_extent.0 > 0.0
            && self.object_count.0 <= self.object_count.1
            && self.object_count.0 >= 1
            && self.referrals_per_object.0 <= self.referrals_per_object.1
            && self.points_per_object >= 8
            && !self.adjectives.is_empty()
            && !self.materials.is_empty()
            && !self.relations.is_empty();
        if ok {
            Ok(())
        } else {
            Err(DatagenError::InvalidConfig)
        }
    }
}

/// Crisp room-frame geometric predicates over node bounding boxes. These
/// definitions both generate referrals/edges and verify them afterwards.
pub fn relation_holds(relation: &str, a: &Aabb, b: &Aabb) -> bool {
    let margin = 0.05f32;
    match relation {
        "left of" => a.centroid[0] < b.centroid[0] - margin,
        "right of" => a.centroid[0] > b.centroid[0] + margin,
        "in front of" => a.centroid[1] < b.centroid[1] - margin,
        "behind" => a.centroid[1] > b.centroid[1] + margin,
        "near" => {
            let dx = a.centroid[0] - b.centroid[0];
            let dy = a.centroid[1] - b.centroid[1];
            (dx * dx + dy * dy).sqrt() < 1.0
        }
        "standing on" => vertical_contact(a, b) && footprint_overlap(a, b) >= 0.5 * footprint(a),
        "supported by" => vertical_contact(a, b) && footprint_overlap(a, b) > 0.0,
        _ => false,
    }
}

fn vertical_contact(a: &Aabb, b: &Aabb) -> bool {
    (a.min()[2] - b.max()[2]).abs() < 0.03
}

fn footprint(a: &Aabb) -> f32 {
    a.extent[0] * a.extent[1]
}

fn footprint_overlap(a: &Aabb, b: &Aabb) -> f32 {
    let (a_min, a_max) = (a.min(), a.max());
    let (b_min, b_max) = (b.min(), b.max());
    let w = (a_max[0].min(b_max[0]) - a_min[0].max(b_min[0])).max(0.0);
    let d = (a_max[1].min(b_max[1]) - a_min[1].max(b_min[1])).max(0.0);
    w * d
}

struct PlacedObject {
    kind: ShapeKind,
    adjective: String,
    material: String,
    mesh: crate::scenegraph::TriMesh,
    support: Option<usize>,
}

fn sample_gaussian(rng: &mut ChaCha8Rng, sigma: f32) -> f32 {
    let u1: f32 = rng.random_range(1e-7f32..1.0);
    let u2: f32 = rng.random_range(0.0f32..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

fn xy_overlaps(a: &Aabb, b: &Aabb, margin: f32) -> bool {
    let (a_min, a_max) = (a.min(), a.max());
    let (b_min, b_max) = (b.min(), b.max());
    a_min[0] - margin < b_max[0]
        && b_min[0] - margin < a_max[0]
        && a_min[1] - margin < b_max[1]
        && b_min[1] - margin < a_max[1]
}

/// Places non-overlapping objects on a floor plane (with occasional
/// stacking), samples point/mesh payloads, writes templated captions and
/// spatial referrals, and resolves referrals into edges when the described
/// target is unique.
pub fn generate_scene(config: &SyntheticSceneConfig, seed: u64) -> Result<SceneGraph, DatagenError> {
    config.validate()?;
    let mut rng = seeded_rng(seed, 0x7363_656e);
    let room = rng.random_range(config.room_extent.0..=config.room_extent.1);
    let half = 0.5 * room;
    let n_objects = rng.random_range(config.object_count.0..=config.object_count.1);

    // materials drawn without replacement keep captions unique per scene
    let mut material_order: Vec<String> = config.materials.clone();
    for i in (1..material_order.len()).rev() {
        let j = rng.random_range(0..=i);
        material_order.swap(i, j);
    }

    let mut placed: Vec<PlacedObject> = Vec::new();
    let mut bboxes: Vec<Aabb> = Vec::new(); // mesh-extent boxes used for placement

    for i in 0..n_objects {
        let kind = match rng.random_range(0.0f32..1.0) {
            x if x < 0.35 => ShapeKind::Box,
            x if x < 0.60 => ShapeKind::Cylinder,
            x if x < 0.80 => ShapeKind::Sphere,
            _ => ShapeKind::Composite,
        };
        let base = match kind {
            ShapeKind::Box => box_mesh(
                rng.random_range(0.3f32..1.2),
                rng.random_range(0.3f32..1.2),
                rng.random_range(0.3f32..1.5),
            ),
            ShapeKind::Cylinder => {
                cylinder_mesh(rng.random_range(0.15f32..0.5), rng.random_range(0.3f32..1.4), 24)
            }
            ShapeKind::Sphere => sphere_mesh(rng.random_range(0.15f32..0.45), 8, 12),
            ShapeKind::Composite => composite_mesh(
                rng.random_range(0.5f32..1.2),
                rng.random_range(0.5f32..1.2),
                rng.random_range(0.8f32..1.8),
            ),
        };
        let yaw = rng.random_range(0.0f32..std::f32::consts::TAU);

        let mut placement: Option<(crate::scenegraph::TriMesh, Option<usize>)> = None;
        for _attempt in 0..config.placement_retries {
            // try stacking first
            let stack_target = if rng.random_range(0.0f32..1.0) < config.stack_probability {
                let candidates: Vec<usize> = placed
                    .iter()
                    .enumerate()
                    .filter(|(j, p)| p.kind.stackable_top() && p.support.is_none() && *j < bboxes.len())
                    .map(|(j, _)| j)
                    .collect();
                if candidates.is_empty() {
                    None
                } else {
                    Some(candidates[rng.random_range(0..candidates.len())])
                }
            } else {
                None
            };
            let candidate = if let Some(t) = stack_target {
                let top = &bboxes[t];
                let posed = pose_mesh(
                    &base,
                    yaw,
                    [top.centroid[0], top.centroid[1], top.max()[2]],
                );
                let bb = Aabb::from_points(&posed.vertices).expect("mesh has vertices");
                // footprint must fit within the support's top
                let support = &bboxes[t];
                let fits = bb.extent[0] <= support.extent[0]
                    && bb.extent[1] <= support.extent[1]
                    && bb.max()[2] < 3.0;
                if fits {
                    Some((posed, Some(t)))
                } else {
                    None
                }
            } else {
                let x = rng.random_range(-half..half);
                let y = rng.random_range(-half..half);
                let posed = pose_mesh(&base, yaw, [x, y, 0.0]);
                let bb = Aabb::from_points(&posed.vertices).expect("mesh has vertices");
                let clear = bboxes
                    .iter()
                    .enumerate()
                    .all(|(j, other)| placed[j].support.is_some() || !xy_overlaps(&bb, other, 0.05));
                let inside = bb.min()[0] > -half - 0.01
                    && bb.max()[0] < half + 0.01
                    && bb.min()[1] > -half - 0.01
                    && bb.max()[1] < half + 0.01;
                if clear && inside {
                    Some((posed, None))
                } else {
                    None
                }
            };
            if let Some((mesh, support)) = candidate {
                let bb = Aabb::from_points(&mesh.vertices).expect("mesh has vertices");
                bboxes.push(bb);
                placement = Some((mesh, support));
                break;
            }
        }
        let Some((mesh, support)) = placement else {
            return Err(DatagenError::InfeasiblePlacement {
                object: i,
                retries: config.placement_retries,
            });
        };
        let material = material_order[i % material_order.len()].clone();
        let color = config.adjectives[rng.random_range(0..config.adjectives.len())].clone();
        placed.push(PlacedObject {
            kind,
            adjective: color, // may be replaced by a size term once the payload bbox is known
            material,
            mesh,
            support,
        });
    }

    // payloads
    let mut nodes = Vec::with_capacity(placed.len());
    for (i, obj) in placed.iter_mut().enumerate() {
        let mut pts = sample_mesh_surface(&obj.mesh, config.points_per_object, seed ^ (i as u64) << 17)
            .map_err(|_| DatagenError::InfeasiblePlacement {
                object: i,
                retries: 0,
            })?;
        for p in pts.iter_mut() {
            for c in p.iter_mut() {
                *c += sample_gaussian(&mut rng, config.point_noise_sigma);
            }
        }
        let bbox = Aabb::from_points(&pts).expect("non-empty");
        if let Some(size_term) = size_adjective(&bbox) {
            obj.adjective = size_term.to_string();
        }
        let caption = format!(
            "The {} {} is {}",
            obj.adjective,
            obj.kind.noun(),
            obj.material
        );
        nodes.push(ObjectNode {
            id: i as u64,
            label: Some(obj.kind.noun().to_string()),
            points: pts,
            mesh: Some(obj.mesh.clone()),
            caption: Some(caption),
            referrals: Vec::new(),
            bbox,
            text_embedding: None,
            referral_embeddings: None,
        });
    }

    // referrals + rule-resolved edges over the payload bounding boxes
    let describe = |node: &ObjectNode, obj: &PlacedObject, with_adjective: bool| -> String {
        let _ = node;
        if with_adjective {
            format!("{} {}", obj.adjective, obj.kind.noun())
        } else {
            obj.kind.noun().to_string()
        }
    };
    let mut edges: Vec<Edge> = Vec::new();
    let n = nodes.len();
    for a_idx in 0..n {
        let n_ref = rng.random_range(config.referrals_per_object.0..=config.referrals_per_object.1);
        let mut added = 0usize;
        let mut attempts = 0usize;
        while added < n_ref && attempts < 12 {
            attempts += 1;
            let relation = &config.relations[rng.random_range(0..config.relations.len())];
            // candidates truly satisfying the relation
            let satisfying: Vec<usize> = (0..n)
                .filter(|&b| b != a_idx && relation_holds(relation, &nodes[a_idx].bbox, &nodes[b].bbox))
                .collect();
            if satisfying.is_empty() {
                continue;
            }
            // nearest satisfying candidate becomes the described target
            let target = *satisfying
                .iter()
                .min_by(|&&x, &&y| {
                    let dx = centroid_dist(&nodes[a_idx].bbox, &nodes[x].bbox);
                    let dy = centroid_dist(&nodes[a_idx].bbox, &nodes[y].bbox);
                    dx.partial_cmp(&dy).expect("finite").then(x.cmp(&y))
                })
                .expect("non-empty");
            // occasionally omit the adjective so the referral can be ambiguous
            let with_adjective = rng.random_range(0.0f32..1.0) >= 0.15;
            let text = format!(
                "the {} {} is {} the {}",
                placed[a_idx].adjective,
                placed[a_idx].kind.noun(),
                relation,
                describe(&nodes[target], &placed[target], with_adjective),
            );
            if nodes[a_idx].referrals.contains(&text) {
                continue;
            }
            nodes[a_idx].referrals.push(text);
            added += 1;

            // rule-based resolution: an edge is added only when exactly one
            // node matches both the relation and the description
            let matching: Vec<usize> = (0..n)
                .filter(|&b| {
                    b != a_idx
                        && relation_holds(relation, &nodes[a_idx].bbox, &nodes[b].bbox)
                        && describe(&nodes[b], &placed[b], with_adjective)
                            == describe(&nodes[target], &placed[target], with_adjective)
                })
                .collect();
            if matching.len() == 1 {
                let edge = Edge {
                    src: a_idx as u64,
                    dst: matching[0] as u64,
                    predicate: relation.clone(),
                };
                if !edges.contains(&edge) {
                    edges.push(edge);
                }
            }
        }
    }

    let graph = SceneGraph { nodes, edges };
    graph
        .validate()
        .map_err(|e| DatagenError::GeneratedInvalid(e.to_string()))?;
    Ok(graph)
}

/// Size descriptor when the object's geometry is distinctive enough; the
/// caption then carries information a geometric encoder can also see.
fn size_adjective(bbox: &Aabb) -> Option<&'static str> {
    let height = bbox.extent[2];
    let footprint = bbox.extent[0] * bbox.extent[1];
    if height > 1.0 {
        Some("tall")
    } else if height < 0.45 {
        Some("short")
    } else if footprint > 0.8 {
        Some("wide")
    } else if footprint < 0.2 {
        Some("narrow")
    } else {
        None
    }
}

fn centroid_dist(a: &Aabb, b: &Aabb) -> f32 {
    let dx = a.centroid[0] - b.centroid[0];
    let dy = a.centroid[1] - b.centroid[1];
    let dz = a.centroid[2] - b.centroid[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_object_scene_has_one_node_no_edges() {
        let config = SyntheticSceneConfig {
            object_count: (1, 1),
            ..SyntheticSceneConfig::default()
        };
        let g = generate_scene(&config, 7).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
        assert!(g.nodes[0].caption.is_some());
        assert!(!g.nodes[0].points.is_empty());
    }

    #[test]
    fn same_seed_reproduces_the_scene() {
        let config = SyntheticSceneConfig::default();
        let a = generate_scene(&config, 42).unwrap();
        let b = generate_scene(&config, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&config, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_edge_predicate_holds_geometrically() {
        let config = SyntheticSceneConfig::default();
        for seed in 0..10u64 {
            let g = generate_scene(&config, seed).unwrap();
            assert!(!g.edges.is_empty(), "seed {seed} produced no edges");
            let idx = g.node_index();
            for e in &g.edges {
                let a = &g.nodes[idx[&e.src]].bbox;
                let b = &g.nodes[idx[&e.dst]].bbox;
                assert!(
                    relation_holds(&e.predicate, a, b),
                    "seed {seed}: edge {} -[{}]-> {} does not hold",
                    e.src,
                    e.predicate,
                    e.dst
                );
            }
        }
    }

    #[test]
    fn captions_are_unique_within_a_scene() {
        let config = SyntheticSceneConfig::default();
        for seed in 0..10u64 {
            let g = generate_scene(&config, seed).unwrap();
            let mut captions: Vec<&String> =
                g.nodes.iter().filter_map(|n| n.caption.as_ref()).collect();
            let total = captions.len();
            captions.sort();
            captions.dedup();
            assert_eq!(captions.len(), total, "duplicate captions at seed {seed}");
        }
    }

    #[test]
    fn left_of_implies_x_order() {
        let a = Aabb {
            centroid: [0.0, 0.0, 0.5],
            extent: [1.0, 1.0, 1.0],
        };
        let b = Aabb {
            centroid: [2.0, 0.0, 0.5],
            extent: [1.0, 1.0, 1.0],
        };
        assert!(relation_holds("left of", &a, &b));
        assert!(!relation_holds("left of", &b, &a));
        assert!(relation_holds("right of", &b, &a));
    }

    #[test]
    fn standing_on_requires_contact_and_overlap() {
        let support = Aabb {
            centroid: [0.0, 0.0, 0.25],
            extent: [1.0, 1.0, 0.5],
        };
        let on_top = Aabb {
            centroid: [0.0, 0.0, 0.75],
            extent: [0.4, 0.4, 0.5],
        };
        assert!(relation_holds("standing on", &on_top, &support));
        assert!(relation_holds("supported by", &on_top, &support));
        let floating = Aabb {
            centroid: [0.0, 0.0, 2.0],
            extent: [0.4, 0.4, 0.5],
        };
        assert!(!relation_holds("standing on", &floating, &support));
    }
}
