//! Shared fixtures for the criterion benchmarks.

use sgalign_core::datagen::{generate_scene, make_pair, ScenePair, SyntheticSceneConfig};
use sgalign_core::model::{ModelConfig, ModelParams};

pub fn bench_scene_config() -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        object_count: (10, 12),
        points_per_object: 300,
        ..SyntheticSceneConfig::default()
    }
}

pub fn bench_pair(seed: u64) -> ScenePair {
    let scene = generate_scene(&bench_scene_config(), seed).expect("scene generates");
    make_pair(&scene, 0.6, seed ^ 0xbe, false).expect("pair extracts")
}

pub fn bench_model() -> ModelParams {
    ModelParams::init(ModelConfig::default(), 42)
}
