//! Joint-embedding construction: per-modality projection heads, trainable
//! attention-weighted fusion over the present-modality mask, and the
//! missing-modality handling that renormalizes the attention softmax.

use thiserror::Error;

use crate::encoders::{
    embed_caption, embed_referrals, encode_mesh, encode_point_cloud, encode_structure,
    SamplingError, TextEmbeddingProvider, TextError, DEFAULT_MESH_SAMPLES,
    DEFAULT_POINT_RESOLUTION,
};
use crate::model::{HeadViews, ModelViews};
use crate::numerics::{linear, seeded_rng, Graph, Tensor, LAYER_NORM_EPS};
use crate::scenegraph::{structure_features, ModalityKind, ModalityMask, SceneGraph};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("empty modality mask: no modality left to fuse")]
    EmptyMask,
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// Projection head: raw encoder output to a unit-norm D-vector.
pub fn project_modality<'g>(head: &HeadViews<'g>, raw: Tensor<'g>) -> Tensor<'g> {
    let n = raw.shape()[0];
    let x = raw.reshape(&[1, n]);
    let h1 = linear(x, head.l1_w, head.l1_b)
        .layer_norm(LAYER_NORM_EPS)
        .mul_bias(head.l1_gamma)
        .add_bias(head.l1_beta)
        .relu();
    let h2 = linear(h1, head.l2_w, head.l2_b)
        .layer_norm(LAYER_NORM_EPS)
        .mul_bias(head.l2_gamma)
        .add_bias(head.l2_beta)
        .relu();
    let out = linear(h2, head.out_w, head.out_b);
    let d = out.shape()[1];
    out.l2_normalize().reshape(&[d])
}

/// Attention weights over the present modalities: the softmax over the
/// trainable logits renormalized to the mask.
pub fn fusion_weights<'g>(views: &ModelViews<'g>, mask: ModalityMask) -> Tensor<'g> {
    let bools: Vec<bool> = ModalityKind::ALL.map(|k| mask.contains(k)).to_vec();
    views.fusion_logits.masked_softmax(&bools)
}

/// Weighted sum of the projected unimodal embeddings, a two-layer MLP, and
/// a final L2 normalization. Absent modalities contribute nothing.
pub fn fuse<'g>(
    views: &ModelViews<'g>,
    projected: &[Option<Tensor<'g>>; 5],
    mask: ModalityMask,
) -> Result<Tensor<'g>, FusionError> {
    if mask.is_empty() {
        return Err(FusionError::EmptyMask);
    }
    let weights = fusion_weights(views, mask);
    let mut acc: Option<Tensor<'g>> = None;
    for k in ModalityKind::ALL {
        if !mask.contains(k) {
            continue;
        }
        let phi = projected[k.code() as usize]
            .unwrap_or_else(|| panic!("modality {k:?} in mask but not projected"));
        let w_k = weights.slice(k.code() as usize, 1);
        let term = phi.scale_by(w_k);
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    let summed = acc.expect("mask checked non-empty");
    let d = summed.shape()[0];
    let x = summed.reshape(&[1, d]);
    let h = linear(x, views.fusion_mlp_l1_w, views.fusion_mlp_l1_b).relu();
    let out = linear(h, views.fusion_mlp_l2_w, views.fusion_mlp_l2_b);
    Ok(out.l2_normalize().reshape(&[d]))
}

/// Controls which modalities are encoded and at what resolution.
pub struct EmbedOptions<'p> {
    /// Modalities allowed in this pass; intersected with what each node has.
    pub allowed: ModalityMask,
    pub point_resolution: usize,
    pub mesh_samples: usize,
    /// Base seed for mesh surface sampling; per-node seeds derive from it.
    pub mesh_seed: u64,
    pub provider: &'p TextEmbeddingProvider,
}

impl<'p> EmbedOptions<'p> {
    pub fn new(provider: &'p TextEmbeddingProvider) -> Self {
        Self {
            allowed: ModalityMask::ALL,
            point_resolution: DEFAULT_POINT_RESOLUTION,
            mesh_samples: DEFAULT_MESH_SAMPLES,
            mesh_seed: 0,
            provider,
        }
    }
}

/// Per-node dropout exemptions: a mask of modalities to skip for specific
/// nodes, on top of the scene-wide `allowed` mask (used by training-time
/// modality dropout; empty for inference).
pub type NodeMaskOverride = std::collections::BTreeMap<u64, ModalityMask>;

/// Tensor-level embeddings of one scene, in node order.
pub struct EmbeddedScene<'g> {
    pub node_ids: Vec<u64>,
    pub masks: Vec<ModalityMask>,
    pub unimodal: Vec<[Option<Tensor<'g>>; 5]>,
    pub joint: Vec<Tensor<'g>>,
}

/// Plain-value embeddings of one scene.
#[derive(Debug, Clone)]
pub struct NodeEmbeddingSet {
    pub node_ids: Vec<u64>,
    pub masks: Vec<ModalityMask>,
    pub unimodal: Vec<[Option<Vec<f32>>; 5]>,
    pub joint: Vec<Vec<f32>>,
}

impl NodeEmbeddingSet {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn joint_of(&self, id: u64) -> Option<&[f32]> {
        self.node_ids
            .iter()
            .position(|&n| n == id)
            .map(|i| self.joint[i].as_slice())
    }
}

/// Run all applicable encoders, projections and fusion for every node.
///
/// The structure modality is present iff the scene has at least one edge or
/// at least two nodes (and S is allowed).
pub fn embed_scene_tensors<'g>(
    g: &'g Graph,
    views: &ModelViews<'g>,
    graph: &SceneGraph,
    opts: &EmbedOptions<'_>,
    overrides: Option<&NodeMaskOverride>,
    slope: f32,
) -> Result<EmbeddedScene<'g>, FusionError> {
    use rand::RngExt;

    let structure_available = !graph.edges.is_empty() || graph.nodes.len() >= 2;
    let structure_rows = if structure_available && opts.allowed.contains(ModalityKind::Structure) {
        let feats = structure_features(graph);
        let neigh = graph.in_neighbors();
        Some(encode_structure(g, &views.gat, &feats, &neigh, slope))
    } else {
        None
    };

    let mut node_ids = Vec::with_capacity(graph.nodes.len());
    let mut masks = Vec::with_capacity(graph.nodes.len());
    let mut unimodal = Vec::with_capacity(graph.nodes.len());
    let mut joint = Vec::with_capacity(graph.nodes.len());

    for (pos, node) in graph.nodes.iter().enumerate() {
        let node_allowed = match overrides.and_then(|o| o.get(&node.id)) {
            Some(extra_forbidden) => {
                let mut m = opts.allowed;
                for k in extra_forbidden.iter() {
                    m = m.without(k);
                }
                m
            }
            None => opts.allowed,
        };

        let mut present = ModalityMask::EMPTY;
        let mut projected: [Option<Tensor<'g>>; 5] = [None; 5];

        if node_allowed.contains(ModalityKind::PointCloud) && !node.points.is_empty() {
            let raw = encode_point_cloud(g, &views.point_p, &node.points, opts.point_resolution)?;
            let k = ModalityKind::PointCloud;
            projected[k.code() as usize] = Some(project_modality(views.head(k), raw));
            present = present.with(k);
        }
        if node_allowed.contains(ModalityKind::Mesh) {
            if let Some(mesh) = &node.mesh {
                // stream keyed by mesh content (rigid-invariant), so copies
                // of one object sample corresponding surface points under
                // a shared base seed regardless of node ids or transforms
                let mut seed_rng = seeded_rng(opts.mesh_seed, mesh_sampling_key(mesh));
                let seed: u64 = seed_rng.random();
                let raw = encode_mesh(g, &views.point_m, mesh, opts.mesh_samples, seed)?;
                let k = ModalityKind::Mesh;
                projected[k.code() as usize] = Some(project_modality(views.head(k), raw));
                present = present.with(k);
            }
        }
        if node_allowed.contains(ModalityKind::Structure) {
            if let Some(rows) = structure_rows {
                let raw = rows.gather_rows(&[pos]).reshape(&[rows.shape()[1]]);
                let k = ModalityKind::Structure;
                projected[k.code() as usize] = Some(project_modality(views.head(k), raw));
                present = present.with(k);
            }
        }
        if node_allowed.contains(ModalityKind::Caption) {
            let vec = match (&node.text_embedding, &node.caption) {
                (Some(v), _) => Some(v.clone()),
                (None, Some(c)) => Some(opts.provider.caption_vec(node.id, c)?),
                (None, None) => None,
            };
            if let Some(v) = vec {
                let raw = embed_caption(g, &views.text_t, &v);
                let k = ModalityKind::Caption;
                projected[k.code() as usize] = Some(project_modality(views.head(k), raw));
                present = present.with(k);
            }
        }
        if node_allowed.contains(ModalityKind::Referral) {
            let vecs = match (&node.referral_embeddings, node.referrals.is_empty()) {
                (Some(v), _) => Some(v.clone()),
                (None, false) => Some(opts.provider.referral_vecs(node.id, &node.referrals)?),
                (None, true) => None,
            };
            if let Some(vs) = vecs {
                if let Some(raw) = embed_referrals(g, &views.text_r, &vs) {
                    let k = ModalityKind::Referral;
                    projected[k.code() as usize] = Some(project_modality(views.head(k), raw));
                    present = present.with(k);
                }
            }
        }

        let fused = fuse(views, &projected, present)?;
        node_ids.push(node.id);
        masks.push(present);
        unimodal.push(projected);
        joint.push(fused);
    }

    Ok(EmbeddedScene {
        node_ids,
        masks,
        unimodal,
        joint,
    })
}

/// Rigid-invariant identity of a mesh: vertex/face counts plus coarsely
/// quantized total surface area.
fn mesh_sampling_key(mesh: &crate::scenegraph::TriMesh) -> u64 {
    let mut area = 0.0f64;
    for f in &mesh.faces {
        area += crate::encoders::triangle_area(
            &mesh.vertices[f[0] as usize],
            &mesh.vertices[f[1] as usize],
            &mesh.vertices[f[2] as usize],
        ) as f64;
    }
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for v in [
        mesh.vertices.len() as u64,
        mesh.faces.len() as u64,
        (area * 64.0).round() as u64,
    ] {
        hash ^= v.wrapping_add(0x9e37_79b9);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

/// Inference entry point: embeds a whole scene and extracts plain vectors.
pub fn embed_scene(
    params: &crate::model::ModelParams,
    graph: &SceneGraph,
    opts: &EmbedOptions<'_>,
) -> Result<NodeEmbeddingSet, FusionError> {
    let g = Graph::new();
    let views = params.bind(&g);
    let embedded = embed_scene_tensors(&g, &views, graph, opts, None, params.config.leaky_slope)?;
    Ok(NodeEmbeddingSet {
        node_ids: embedded.node_ids,
        masks: embedded.masks,
        unimodal: embedded
            .unimodal
            .iter()
            .map(|row| std::array::from_fn(|i| row[i].map(|t| t.value())))
            .collect(),
        joint: embedded.joint.iter().map(|t| t.value()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use crate::scenegraph::{Aabb, Edge, ObjectNode};
    use rand::RngExt;

    fn small_params(seed: u64) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                embed_dim: 32,
                hidden_width: 16,
                text_dim: 24,
                ..ModelConfig::default()
            },
            seed,
        )
    }

    fn toy_provider(dim: usize) -> TextEmbeddingProvider {
        TextEmbeddingProvider::ToyHash { dim, seed: 7 }
    }

    fn cloud_node(id: u64, center: [f32; 3], seed: u64) -> ObjectNode {
        let mut rng = seeded_rng(seed, id ^ 0xc10d);
        let points: Vec<[f32; 3]> = (0..24)
            .map(|_| {
                [
                    center[0] + rng.random_range(-0.4f32..0.4),
                    center[1] + rng.random_range(-0.4f32..0.4),
                    center[2] + rng.random_range(-0.4f32..0.4),
                ]
            })
            .collect();
        let bbox = Aabb::from_points(&points).unwrap();
        ObjectNode {
            id,
            label: None,
            points,
            mesh: None,
            caption: Some(format!("object number {id}")),
            referrals: vec![],
            bbox,
            text_embedding: None,
            referral_embeddings: None,
        }
    }

    #[test]
    fn projection_output_is_unit_norm() {
        let params = small_params(1);
        let g = Graph::new();
        let views = params.bind(&g);
        let mut rng = seeded_rng(2, 31);
        for _ in 0..10 {
            let raw_data: Vec<f32> = (0..128).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let raw = g.leaf(raw_data, &[128]);
            let out = project_modality(views.head(ModalityKind::PointCloud), raw);
            let n: f32 = out.value().iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "norm {n}");
        }
    }

    #[test]
    fn zero_input_projects_to_deterministic_unit_vector() {
        let params = small_params(2);
        let g = Graph::new();
        let views = params.bind(&g);
        let raw = g.leaf(vec![0.0; 128], &[128]);
        let a = project_modality(views.head(ModalityKind::Caption), raw).value();
        let raw2 = g.leaf(vec![0.0; 128], &[128]);
        let b = project_modality(views.head(ModalityKind::Caption), raw2).value();
        assert_eq!(a, b);
        let n: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(a.iter().any(|v| v.abs() > 1e-8), "all-zero projection");
    }

    #[test]
    fn equal_logits_give_uniform_weights_over_full_mask() {
        let params = small_params(3);
        let g = Graph::new();
        let views = params.bind(&g);
        let w = fusion_weights(&views, ModalityMask::ALL).value();
        for v in &w {
            assert!((v - 0.2).abs() < 1e-6, "weights {w:?}");
        }
    }

    #[test]
    fn single_present_modality_gets_weight_one() {
        let params = small_params(4);
        let g = Graph::new();
        let views = params.bind(&g);
        let mask = ModalityMask::EMPTY.with(ModalityKind::Caption);
        let w = fusion_weights(&views, mask).value();
        assert_eq!(w[ModalityKind::Caption.code() as usize], 1.0);
        for (i, v) in w.iter().enumerate() {
            if i != ModalityKind::Caption.code() as usize {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn masked_weights_sum_to_one() {
        let params = small_params(5);
        let g = Graph::new();
        let views = params.bind(&g);
        let combos = [
            ModalityMask::parse("PM").unwrap(),
            ModalityMask::parse("PTR").unwrap(),
            ModalityMask::parse("MS").unwrap(),
            ModalityMask::ALL,
        ];
        for mask in combos {
            let w = fusion_weights(&views, mask).value();
            let s: f32 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "mask {mask}: sum {s}");
        }
    }

    #[test]
    fn absent_modalities_cannot_leak_into_the_joint_embedding() {
        let params = small_params(6);
        let g = Graph::new();
        let views = params.bind(&g);
        let mut rng = seeded_rng(7, 33);
        let d = params.config.embed_dim;
        let phi_p: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let phi_t: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mask = ModalityMask::EMPTY
            .with(ModalityKind::PointCloud)
            .with(ModalityKind::Caption);

        let mk = |junk: f32| -> [Option<Tensor<'_>>; 5] {
            let mut row: [Option<Tensor<'_>>; 5] = [None; 5];
            row[ModalityKind::PointCloud.code() as usize] =
                Some(g.leaf(phi_p.clone(), &[d]).l2_normalize());
            row[ModalityKind::Caption.code() as usize] =
                Some(g.leaf(phi_t.clone(), &[d]).l2_normalize());
            // absent entries filled with arbitrary values
            row[ModalityKind::Mesh.code() as usize] = Some(g.leaf(vec![junk; d], &[d]));
            row[ModalityKind::Structure.code() as usize] = Some(g.leaf(vec![-junk; d], &[d]));
            row
        };
        let a = fuse(&views, &mk(3.7), mask).unwrap().value();
        let b = fuse(&views, &mk(-123.0), mask).unwrap().value();
        assert_eq!(a, b, "absent modality values leaked into the fusion");
    }

    #[test]
    fn empty_mask_is_an_error() {
        let params = small_params(7);
        let g = Graph::new();
        let views = params.bind(&g);
        let row: [Option<Tensor<'_>>; 5] = [None; 5];
        assert!(matches!(
            fuse(&views, &row, ModalityMask::EMPTY),
            Err(FusionError::EmptyMask)
        ));
    }

    #[test]
    fn fusion_is_continuous_in_the_logits() {
        // perturbing one logit by eps changes the joint embedding by O(eps)
        let params = small_params(8);
        let eps = 1e-4f32;
        let mut rng = seeded_rng(9, 34);
        let d = params.config.embed_dim;
        let raws: Vec<Vec<f32>> = (0..2)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let mask = ModalityMask::parse("PM").unwrap();

        let embed_with = |params: &ModelParams| -> Vec<f32> {
            let g = Graph::new();
            let views = params.bind(&g);
            let mut row: [Option<Tensor<'_>>; 5] = [None; 5];
            row[0] = Some(g.leaf(raws[0].clone(), &[d]).l2_normalize());
            row[1] = Some(g.leaf(raws[1].clone(), &[d]).l2_normalize());
            fuse(&views, &row, mask).unwrap().value()
        };
        let base = embed_with(&params);
        let mut perturbed = ModelParams {
            config: params.config.clone(),
            store: params.store.clone(),
        };
        let off = perturbed.store.entry("fusion.logits").offset;
        perturbed.store.values[off] += eps;
        let moved = embed_with(&perturbed);
        let delta: f32 = base
            .iter()
            .zip(&moved)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt();
        assert!(delta <= 100.0 * eps, "delta {delta} not O(eps)");
    }

    #[test]
    fn node_with_points_in_a_two_node_scene_gets_p_and_s() {
        let params = small_params(10);
        let provider = toy_provider(24);
        let mut a = cloud_node(0, [0.0, 0.0, 0.5], 1);
        a.caption = None; // P only
        let b = cloud_node(1, [2.0, 0.0, 0.5], 2);
        let graph = SceneGraph {
            nodes: vec![a, b],
            edges: vec![Edge {
                src: 0,
                dst: 1,
                predicate: "near".into(),
            }],
        };
        let opts = EmbedOptions {
            point_resolution: 16,
            ..EmbedOptions::new(&provider)
        };
        let set = embed_scene(&params, &graph, &opts).unwrap();
        assert_eq!(
            set.masks[0],
            ModalityMask::EMPTY
                .with(ModalityKind::PointCloud)
                .with(ModalityKind::Structure)
        );
        let n: f32 = set.joint[0].iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn singleton_scene_without_edges_has_no_structure_modality() {
        let params = small_params(11);
        let provider = toy_provider(24);
        let graph = SceneGraph {
            nodes: vec![cloud_node(0, [0.0, 0.0, 0.5], 3)],
            edges: vec![],
        };
        let opts = EmbedOptions {
            point_resolution: 16,
            ..EmbedOptions::new(&provider)
        };
        let set = embed_scene(&params, &graph, &opts).unwrap();
        assert!(!set.masks[0].contains(ModalityKind::Structure));
        assert!(set.masks[0].contains(ModalityKind::PointCloud));
        assert!(set.masks[0].contains(ModalityKind::Caption));
    }

    #[test]
    fn node_order_permutation_keeps_per_id_embeddings() {
        let params = small_params(12);
        let provider = toy_provider(24);
        let nodes = vec![
            cloud_node(0, [0.0, 0.0, 0.5], 4),
            cloud_node(1, [2.0, 1.0, 0.5], 5),
            cloud_node(2, [-1.0, 2.0, 0.5], 6),
        ];
        let edges = vec![Edge {
            src: 0,
            dst: 2,
            predicate: "left of".into(),
        }];
        let graph = SceneGraph {
            nodes: nodes.clone(),
            edges: edges.clone(),
        };
        let mut permuted_nodes = nodes;
        permuted_nodes.rotate_left(1);
        let permuted = SceneGraph {
            nodes: permuted_nodes,
            edges,
        };
        let opts = EmbedOptions {
            point_resolution: 16,
            ..EmbedOptions::new(&provider)
        };
        let a = embed_scene(&params, &graph, &opts).unwrap();
        let b = embed_scene(&params, &permuted, &opts).unwrap();
        for id in 0..3u64 {
            let ja = a.joint_of(id).unwrap();
            let jb = b.joint_of(id).unwrap();
            for (x, y) in ja.iter().zip(jb) {
                assert!((x - y).abs() < 1e-6, "node {id} embedding moved");
            }
        }
    }

    #[test]
    fn embeddings_are_finite_on_random_scenes() {
        let params = small_params(13);
        let provider = toy_provider(24);
        let mut rng = seeded_rng(14, 35);
        for trial in 0..100 {
            let n = rng.random_range(1usize..6);
            let nodes: Vec<ObjectNode> = (0..n)
                .map(|i| {
                    cloud_node(
                        i as u64,
                        [
                            rng.random_range(-3.0f32..3.0),
                            rng.random_range(-3.0f32..3.0),
                            rng.random_range(0.0f32..1.0),
                        ],
                        trial * 10 + i as u64,
                    )
                })
                .collect();
            let graph = SceneGraph { nodes, edges: vec![] };
            let opts = EmbedOptions {
                point_resolution: 8,
                ..EmbedOptions::new(&provider)
            };
            let set = embed_scene(&params, &graph, &opts).unwrap();
            for j in &set.joint {
                assert!(j.iter().all(|v| v.is_finite()), "non-finite joint embedding");
            }
            for row in &set.unimodal {
                for v in row.iter().flatten() {
                    assert!(v.iter().all(|x| x.is_finite()), "non-finite unimodal");
                }
            }
        }
    }
}
