//! Optional configuration file (TOML or JSON) supplying defaults for any
//! command. Explicit command-line flags always win over file values.

use std::path::Path;

use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    // generation
    pub scenes: Option<usize>,
    pub pairs_per_scene: Option<usize>,
    pub overlap_min: Option<f32>,
    pub overlap_max: Option<f32>,
    pub objects_min: Option<usize>,
    pub objects_max: Option<usize>,
    pub points_per_object: Option<usize>,
    pub point_noise_sigma: Option<f32>,
    // training
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f32>,
    pub dropout: Option<f32>,
    pub single_modality_dropout: Option<f32>,
    pub point_resolution: Option<usize>,
    pub mesh_samples: Option<usize>,
    pub embed_dim: Option<usize>,
    pub hidden_width: Option<usize>,
    // matching / eval / bench
    pub threshold: Option<f32>,
    pub runs: Option<usize>,
    pub pairs: Option<usize>,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false)
        || text.trim_start().starts_with('{');
    if is_json {
        serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    } else {
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }
}

/// Flag value if given, else file value, else the built-in default.
pub fn pick<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
