//! Unimodal feature extractors: point clouds and meshes through a shared
//! per-point MLP with max pooling, structure graphs through a two-layer
//! diagonal GAT, captions and referrals through a pluggable text provider
//! followed by a trainable projection.

mod gat;
mod pointnet;
mod sampling;
mod text;

pub use gat::{encode_structure, GatLayerViews, GatViews, GAT_HIDDEN, GAT_LAYERS, GAT_LEAKY_SLOPE};
pub use pointnet::{encode_points, PointNetViews, POINT_FEATURE_DIM, POINT_HIDDEN_1, POINT_HIDDEN_2};
pub use sampling::{canonicalize_points, fps, sample_mesh_surface, triangle_area, SamplingError};
pub use text::{
    hash_embed, load_embeddings, mean_referral_vec, save_embeddings, TextEmbeddingProvider,
    TextError, EMBEDDING_MAGIC, TOY_HASH_DEFAULT_SEED, TOY_HASH_DIM,
};

use crate::numerics::{Graph, Tensor};
use crate::scenegraph::TriMesh;

/// Default point-cloud resolution after farthest-point sampling.
pub const DEFAULT_POINT_RESOLUTION: usize = 512;
/// Default number of surface samples drawn from a mesh before encoding.
pub const DEFAULT_MESH_SAMPLES: usize = 2048;

/// Full point pipeline: fps to `k`, canonicalize, encode.
pub fn encode_point_cloud<'g>(
    g: &'g Graph,
    views: &PointNetViews<'g>,
    points: &[[f32; 3]],
    k: usize,
) -> Result<Tensor<'g>, SamplingError> {
    let idx = fps(points, k)?;
    let sub: Vec<[f32; 3]> = idx.into_iter().map(|i| points[i]).collect();
    let canon = canonicalize_points(&sub);
    Ok(encode_points(g, views, &canon))
}

/// Mesh pipeline: uniform surface sampling, canonicalize, encode with the
/// mesh-modality weights.
pub fn encode_mesh<'g>(
    g: &'g Graph,
    views: &PointNetViews<'g>,
    mesh: &TriMesh,
    n_samples: usize,
    seed: u64,
) -> Result<Tensor<'g>, SamplingError> {
    let pts = sample_mesh_surface(mesh, n_samples, seed)?;
    let canon = canonicalize_points(&pts);
    Ok(encode_points(g, views, &canon))
}

/// Trainable linear projection applied to provider-space text vectors.
pub struct TextProjViews<'g> {
    pub w: Tensor<'g>,
    pub b: Tensor<'g>,
}

/// Caption feature: provider vector through the caption projection.
pub fn embed_caption<'g>(
    g: &'g Graph,
    proj: &TextProjViews<'g>,
    provider_vec: &[f32],
) -> Tensor<'g> {
    let x = g.leaf(provider_vec.to_vec(), &[1, provider_vec.len()]);
    x.matmul(proj.w).add_bias(proj.b).reshape(&[proj.b.shape()[0]])
}

/// Referral feature: arithmetic mean of per-referral provider vectors, then
/// the referral projection. Returns `None` for an empty referral list.
pub fn embed_referrals<'g>(
    g: &'g Graph,
    proj: &TextProjViews<'g>,
    provider_vecs: &[Vec<f32>],
) -> Option<Tensor<'g>> {
    let mean = mean_referral_vec(provider_vecs)?;
    Some(embed_caption(g, proj, &mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Init, ParamStore};
    use rand::RngExt;

    fn point_store(seed: u64) -> ParamStore {
        let mut rng = seeded_rng(seed, 21);
        let mut store = ParamStore::new();
        store.register("w1", &[3, POINT_HIDDEN_1], Init::Uniform(0.5), &mut rng);
        store.register("b1", &[POINT_HIDDEN_1], Init::Zeros, &mut rng);
        store.register("w2", &[POINT_HIDDEN_1, POINT_HIDDEN_2], Init::Uniform(0.1), &mut rng);
        store.register("b2", &[POINT_HIDDEN_2], Init::Zeros, &mut rng);
        store.register("w3", &[POINT_HIDDEN_2, 32], Init::Uniform(0.1), &mut rng);
        store.register("b3", &[32], Init::Zeros, &mut rng);
        store
    }

    fn pv<'g>(bound: &crate::numerics::BoundParams<'g>) -> PointNetViews<'g> {
        PointNetViews {
            w1: bound.view("w1"),
            b1: bound.view("b1"),
            w2: bound.view("w2"),
            b2: bound.view("b2"),
            w3: bound.view("w3"),
            b3: bound.view("b3"),
        }
    }

    #[test]
    fn point_pipeline_is_translation_invariant() {
        let store = point_store(1);
        let mut rng = seeded_rng(2, 22);
        let cloud: Vec<[f32; 3]> = (0..100)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0f32..1.0)))
            .collect();
        let t = [4.2f32, -3.3, 9.9];
        let moved: Vec<[f32; 3]> = cloud
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();

        let g = Graph::new();
        let bound = store.bind(&g);
        let v = pv(&bound);
        let a = encode_point_cloud(&g, &v, &cloud, 32).unwrap().value();
        let b = encode_point_cloud(&g, &v, &moved, 32).unwrap().value();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "translation changed the embedding");
        }
    }

    #[test]
    fn mesh_encoding_matches_point_encoding_of_its_samples() {
        let store = point_store(3);
        let mesh = TriMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
            faces: vec![[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]],
        };
        let g = Graph::new();
        let bound = store.bind(&g);
        let v = pv(&bound);
        let direct = encode_mesh(&g, &v, &mesh, 128, 7).unwrap().value();
        let sampled = sample_mesh_surface(&mesh, 128, 7).unwrap();
        let via_points = encode_points(&g, &v, &canonicalize_points(&sampled)).value();
        assert_eq!(direct, via_points);
    }

    #[test]
    fn empty_mesh_errors() {
        let store = point_store(4);
        let mesh = TriMesh {
            vertices: vec![[0.0; 3]; 3],
            faces: vec![[0, 1, 2]],
        };
        let g = Graph::new();
        let bound = store.bind(&g);
        let v = pv(&bound);
        assert!(encode_mesh(&g, &v, &mesh, 16, 0).is_err());
    }

    #[test]
    fn caption_and_referral_projection_shapes() {
        let mut rng = seeded_rng(5, 23);
        let mut store = ParamStore::new();
        store.register("w", &[8, 16], Init::Uniform(0.3), &mut rng);
        store.register("b", &[16], Init::Zeros, &mut rng);
        let g = Graph::new();
        let bound = store.bind(&g);
        let proj = TextProjViews {
            w: bound.view("w"),
            b: bound.view("b"),
        };
        let vec = vec![0.5f32; 8];
        let t = embed_caption(&g, &proj, &vec);
        assert_eq!(t.shape(), vec![16]);

        let u = vec![1.0f32, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let neg: Vec<f32> = u.iter().map(|x| -x).collect();
        // opposite referral vectors: the mean is zero, the projection is the bias
        let r = embed_referrals(&g, &proj, &[u, neg]).unwrap();
        assert_eq!(r.value(), bound.view("b").value());
        assert!(embed_referrals(&g, &proj, &[]).is_none());
    }
}
