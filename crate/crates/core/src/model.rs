//! All trainable parameters of the alignment model, addressable by name
//! over one flat buffer, plus typed tensor views for the forward pass.

use std::path::Path;

use crate::encoders::{
    GatLayerViews, GatViews, PointNetViews, TextProjViews, GAT_HIDDEN, GAT_LAYERS,
    GAT_LEAKY_SLOPE, POINT_FEATURE_DIM, POINT_HIDDEN_1, POINT_HIDDEN_2, TOY_HASH_DIM,
};
use crate::numerics::{
    load_checkpoint, save_checkpoint, seeded_rng, BoundParams, CheckpointError, Graph, Init,
    ParamStore, Tensor,
};
use crate::scenegraph::ModalityKind;

/// Joint embedding dimension D.
pub const DEFAULT_EMBED_DIM: usize = 512;
/// Hidden width of projection heads.
pub const DEFAULT_HIDDEN_WIDTH: usize = 128;
/// Number of log-variance entries: one for the joint term plus ICL and IAL
/// per modality. The joint slot is reserved; the joint contrastive term is
/// applied unweighted.
pub const LOG_VAR_COUNT: usize = 1 + 2 * 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_width: usize,
    pub text_dim: usize,
    pub leaky_slope: f32,
    /// Share the point backbone between P and M instead of separate weights.
    pub share_pm_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            text_dim: TOY_HASH_DIM,
            leaky_slope: GAT_LEAKY_SLOPE,
            share_pm_weights: false,
        }
    }
}

pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

const HEAD_KEYS: [(&str, ModalityKind); 5] = [
    ("p", ModalityKind::PointCloud),
    ("m", ModalityKind::Mesh),
    ("s", ModalityKind::Structure),
    ("t", ModalityKind::Caption),
    ("r", ModalityKind::Referral),
];

fn uniform_limit(fan_in: usize) -> f32 {
    (1.0 / fan_in as f32).sqrt()
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 0x7061_7261);
        let mut store = ParamStore::new();
        let h = config.hidden_width;
        let d = config.embed_dim;

        let register_pointnet = |store: &mut ParamStore, prefix: &str, rng: &mut _| {
            store.register(
                &format!("{prefix}.l1.w"),
                &[3, POINT_HIDDEN_1],
                Init::Uniform(uniform_limit(3)),
                rng,
            );
            store.register(
                &format!("{prefix}.l1.b"),
                &[POINT_HIDDEN_1],
                Init::Uniform(uniform_limit(3)),
                rng,
            );
            store.register(
                &format!("{prefix}.l2.w"),
                &[POINT_HIDDEN_1, POINT_HIDDEN_2],
                Init::Uniform(uniform_limit(POINT_HIDDEN_1)),
                rng,
            );
            store.register(
                &format!("{prefix}.l2.b"),
                &[POINT_HIDDEN_2],
                Init::Uniform(uniform_limit(POINT_HIDDEN_1)),
                rng,
            );
            store.register(
                &format!("{prefix}.l3.w"),
                &[POINT_HIDDEN_2, POINT_FEATURE_DIM],
                Init::Uniform(uniform_limit(POINT_HIDDEN_2)),
                rng,
            );
            store.register(
                &format!("{prefix}.l3.b"),
                &[POINT_FEATURE_DIM],
                Init::Uniform(uniform_limit(POINT_HIDDEN_2)),
                rng,
            );
        };
        register_pointnet(&mut store, "p_enc", &mut rng);
        if !config.share_pm_weights {
            register_pointnet(&mut store, "m_enc", &mut rng);
        }

        store.register(
            "gat.lift.w",
            &[6, GAT_HIDDEN],
            Init::Uniform(uniform_limit(6)),
            &mut rng,
        );
        store.register(
            "gat.lift.b",
            &[GAT_HIDDEN],
            Init::Uniform(uniform_limit(6)),
            &mut rng,
        );
        for l in 0..GAT_LAYERS {
            store.register(&format!("gat.l{l}.diag"), &[GAT_HIDDEN], Init::Ones, &mut rng);
            store.register(
                &format!("gat.l{l}.att_src"),
                &[GAT_HIDDEN],
                Init::Uniform(uniform_limit(GAT_HIDDEN)),
                &mut rng,
            );
            store.register(
                &format!("gat.l{l}.att_dst"),
                &[GAT_HIDDEN],
                Init::Uniform(uniform_limit(GAT_HIDDEN)),
                &mut rng,
            );
        }

        for key in ["text_t", "text_r"] {
            store.register(
                &format!("{key}.w"),
                &[config.text_dim, POINT_FEATURE_DIM],
                Init::Uniform(uniform_limit(config.text_dim)),
                &mut rng,
            );
            store.register(
                &format!("{key}.b"),
                &[POINT_FEATURE_DIM],
                Init::Uniform(uniform_limit(config.text_dim)),
                &mut rng,
            );
        }

        for (key, _) in HEAD_KEYS {
            let prefix = format!("head_{key}");
            store.register(
                &format!("{prefix}.l1.w"),
                &[POINT_FEATURE_DIM, h],
                Init::Uniform(uniform_limit(POINT_FEATURE_DIM)),
                &mut rng,
            );
            store.register(
                &format!("{prefix}.l1.b"),
                &[h],
                Init::Uniform(uniform_limit(POINT_FEATURE_DIM)),
                &mut rng,
            );
            store.register(&format!("{prefix}.l1.gamma"), &[h], Init::Ones, &mut rng);
            store.register(&format!("{prefix}.l1.beta"), &[h], Init::Zeros, &mut rng);
            store.register(
                &format!("{prefix}.l2.w"),
                &[h, h],
                Init::Uniform(uniform_limit(h)),
                &mut rng,
            );
            store.register(
                &format!("{prefix}.l2.b"),
                &[h],
                Init::Uniform(uniform_limit(h)),
                &mut rng,
            );
            store.register(&format!("{prefix}.l2.gamma"), &[h], Init::Ones, &mut rng);
            store.register(&format!("{prefix}.l2.beta"), &[h], Init::Zeros, &mut rng);
            store.register(
                &format!("{prefix}.out.w"),
                &[h, d],
                Init::Uniform(uniform_limit(h)),
                &mut rng,
            );
            store.register(
                &format!("{prefix}.out.b"),
                &[d],
                Init::Uniform(uniform_limit(h)),
                &mut rng,
            );
        }

        store.register("fusion.logits", &[5], Init::Zeros, &mut rng);
        store.register(
            "fusion.mlp.l1.w",
            &[d, d],
            Init::Uniform(uniform_limit(d)),
            &mut rng,
        );
        store.register(
            "fusion.mlp.l1.b",
            &[d],
            Init::Uniform(uniform_limit(d)),
            &mut rng,
        );
        store.register(
            "fusion.mlp.l2.w",
            &[d, d],
            Init::Uniform(uniform_limit(d)),
            &mut rng,
        );
        store.register(
            "fusion.mlp.l2.b",
            &[d],
            Init::Uniform(uniform_limit(d)),
            &mut rng,
        );

        store.register("loss.log_vars", &[LOG_VAR_COUNT], Init::Zeros, &mut rng);

        Self { config, store }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        save_checkpoint(&self.store, path)
    }

    /// Load a checkpoint; model dimensions are reconstructed from the
    /// recorded parameter shapes.
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let store = load_checkpoint(path)?;
        let hidden_width = store.entry("head_p.l1.w").shape[1];
        let embed_dim = store.entry("head_p.out.w").shape[1];
        let text_dim = store.entry("text_t.w").shape[0];
        let share_pm_weights = !store
            .entries()
            .iter()
            .any(|e| e.name == "m_enc.l1.w");
        Ok(Self {
            config: ModelConfig {
                embed_dim,
                hidden_width,
                text_dim,
                leaky_slope: GAT_LEAKY_SLOPE,
                share_pm_weights,
            },
            store,
        })
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> ModelViews<'g> {
        self.views(self.store.bind(g))
    }

    pub fn bind_to<'g>(&self, theta: Tensor<'g>) -> ModelViews<'g> {
        self.views(self.store.bind_to(theta))
    }

    fn views<'g>(&self, bound: BoundParams<'g>) -> ModelViews<'g> {
        let pointnet = |prefix: &str| PointNetViews {
            w1: bound.view(&format!("{prefix}.l1.w")),
            b1: bound.view(&format!("{prefix}.l1.b")),
            w2: bound.view(&format!("{prefix}.l2.w")),
            b2: bound.view(&format!("{prefix}.l2.b")),
            w3: bound.view(&format!("{prefix}.l3.w")),
            b3: bound.view(&format!("{prefix}.l3.b")),
        };
        let point_p = pointnet("p_enc");
        let point_m = if self.config.share_pm_weights {
            pointnet("p_enc")
        } else {
            pointnet("m_enc")
        };
        let gat = GatViews {
            lift_w: bound.view("gat.lift.w"),
            lift_b: bound.view("gat.lift.b"),
            layers: [0, 1].map(|l| GatLayerViews {
                diag: bound.view(&format!("gat.l{l}.diag")),
                att_src: bound.view(&format!("gat.l{l}.att_src")),
                att_dst: bound.view(&format!("gat.l{l}.att_dst")),
            }),
        };
        let text_t = TextProjViews {
            w: bound.view("text_t.w"),
            b: bound.view("text_t.b"),
        };
        let text_r = TextProjViews {
            w: bound.view("text_r.w"),
            b: bound.view("text_r.b"),
        };
        let heads = HEAD_KEYS.map(|(key, _)| {
            let p = format!("head_{key}");
            HeadViews {
                l1_w: bound.view(&format!("{p}.l1.w")),
                l1_b: bound.view(&format!("{p}.l1.b")),
                l1_gamma: bound.view(&format!("{p}.l1.gamma")),
                l1_beta: bound.view(&format!("{p}.l1.beta")),
                l2_w: bound.view(&format!("{p}.l2.w")),
                l2_b: bound.view(&format!("{p}.l2.b")),
                l2_gamma: bound.view(&format!("{p}.l2.gamma")),
                l2_beta: bound.view(&format!("{p}.l2.beta")),
                out_w: bound.view(&format!("{p}.out.w")),
                out_b: bound.view(&format!("{p}.out.b")),
            }
        });
        ModelViews {
            theta: bound.theta,
            point_p,
            point_m,
            gat,
            text_t,
            text_r,
            heads,
            fusion_logits: bound.view("fusion.logits"),
            fusion_mlp_l1_w: bound.view("fusion.mlp.l1.w"),
            fusion_mlp_l1_b: bound.view("fusion.mlp.l1.b"),
            fusion_mlp_l2_w: bound.view("fusion.mlp.l2.w"),
            fusion_mlp_l2_b: bound.view("fusion.mlp.l2.b"),
            log_vars: bound.view("loss.log_vars"),
        }
    }
}

/// Per-modality projection head: two (linear, layer norm, relu) blocks and
/// a final linear to the joint dimension.
pub struct HeadViews<'g> {
    pub l1_w: Tensor<'g>,
    pub l1_b: Tensor<'g>,
    pub l1_gamma: Tensor<'g>,
    pub l1_beta: Tensor<'g>,
    pub l2_w: Tensor<'g>,
    pub l2_b: Tensor<'g>,
    pub l2_gamma: Tensor<'g>,
    pub l2_beta: Tensor<'g>,
    pub out_w: Tensor<'g>,
    pub out_b: Tensor<'g>,
}

pub struct ModelViews<'g> {
    pub theta: Tensor<'g>,
    pub point_p: PointNetViews<'g>,
    pub point_m: PointNetViews<'g>,
    pub gat: GatViews<'g>,
    pub text_t: TextProjViews<'g>,
    pub text_r: TextProjViews<'g>,
    /// Indexed by [`ModalityKind::code`].
    pub heads: [HeadViews<'g>; 5],
    pub fusion_logits: Tensor<'g>,
    pub fusion_mlp_l1_w: Tensor<'g>,
    pub fusion_mlp_l1_b: Tensor<'g>,
    pub fusion_mlp_l2_w: Tensor<'g>,
    pub fusion_mlp_l2_b: Tensor<'g>,
    pub log_vars: Tensor<'g>,
}

impl<'g> ModelViews<'g> {
    pub fn head(&self, k: ModalityKind) -> &HeadViews<'g> {
        &self.heads[k.code() as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::init(ModelConfig::default(), 5);
        let b = ModelParams::init(ModelConfig::default(), 5);
        assert_eq!(a.store, b.store);
        let c = ModelParams::init(ModelConfig::default(), 6);
        assert_ne!(a.store.values, c.store.values);
    }

    #[test]
    fn checkpoint_round_trip_reconstructs_config() {
        let cfg = ModelConfig {
            embed_dim: 64,
            hidden_width: 32,
            text_dim: 48,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(cfg.clone(), 3);
        let dir = std::env::temp_dir().join("sgalign_model_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.sgpp");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.store, params.store);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn shared_pm_weights_drop_the_mesh_encoder() {
        let cfg = ModelConfig {
            share_pm_weights: true,
            embed_dim: 32,
            hidden_width: 16,
            text_dim: 24,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(cfg, 1);
        assert!(!params.store.entries().iter().any(|e| e.name.starts_with("m_enc")));
        let g = Graph::new();
        let views = params.bind(&g);
        assert_eq!(views.point_m.w1.value(), views.point_p.w1.value());
    }
}
