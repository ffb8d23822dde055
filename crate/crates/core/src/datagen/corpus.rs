//! Corpus generation: scene files on disk plus a JSON-lines manifest with
//! ground-truth matches, overlap, transform, and a deterministic 90/10
//! train/val split by scene-id hash.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::RngExt;
use serde::Deserialize;

use super::pair::make_pair;
use super::scene::{generate_scene, SyntheticSceneConfig};
use super::DatagenError;
use crate::numerics::seeded_rng;
use crate::scenegraph::save_scene_graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    /// Scene file paths relative to the manifest location.
    pub g1: String,
    pub g2: String,
    pub matches: Vec<(u64, u64)>,
    pub overlap: f32,
    pub transform: [f32; 16],
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn train_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn val_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Val)
    }
}

fn fnv1a_u64(value: u64, seed: u64) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in value.to_le_bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

fn manifest_line(entry: &ManifestEntry) -> String {
    let mut out = String::new();
    let _ = write!(out, "{{\"g1\":{:?},\"g2\":{:?},\"matches\":[", entry.g1, entry.g2);
    for (i, (a, b)) in entry.matches.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "[{a},{b}]");
    }
    let _ = write!(out, "],\"overlap\":{:.6},\"transform\":[", entry.overlap);
    for (i, v) in entry.transform.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let v = if *v == 0.0 { 0.0 } else { *v };
        let _ = write!(out, "{v:.6}");
    }
    let _ = write!(out, "],\"split\":\"{}\"}}", entry.split.as_str());
    out
}

/// Generate `n_scenes` scenes with `pairs_per_scene` sub-scan pairs each,
/// write canonical scene files plus `manifest.jsonl` under `out_dir`, and
/// return the manifest. Fully deterministic given the seed.
#[allow(clippy::too_many_arguments)]
pub fn generate_corpus(
    config: &SyntheticSceneConfig,
    n_scenes: usize,
    pairs_per_scene: usize,
    overlap_range: (f32, f32),
    seed: u64,
    out_dir: &Path,
    identity_transform: bool,
) -> Result<CorpusManifest, DatagenError> {
    config.validate()?;
    if !(0.1..=0.9).contains(&overlap_range.0)
        || !(0.1..=0.9).contains(&overlap_range.1)
        || overlap_range.0 > overlap_range.1
    {
        return Err(DatagenError::OverlapOutOfRange(overlap_range.0));
    }
    let scenes_dir = out_dir.join("scenes");
    std::fs::create_dir_all(&scenes_dir)?;

    let mut entries = Vec::with_capacity(n_scenes * pairs_per_scene);
    for scene_idx in 0..n_scenes {
        let scene_seed = seed
            .wrapping_mul(0x9e37_79b9)
            .wrapping_add(scene_idx as u64);
        let scene = generate_scene(config, scene_seed)?;
        let split = if fnv1a_u64(scene_idx as u64, seed) % 10 == 0 {
            Split::Val
        } else {
            Split::Train
        };
        for pair_idx in 0..pairs_per_scene {
            let mut rng = seeded_rng(scene_seed, 0x7067 + pair_idx as u64);
            let mut pair = None;
            for _retry in 0..20 {
                let target = rng.random_range(overlap_range.0..=overlap_range.1);
                let pair_seed: u64 = rng.random();
                match make_pair(&scene, target, pair_seed, identity_transform) {
                    Ok(p) => {
                        pair = Some(p);
                        break;
                    }
                    Err(DatagenError::UnattainableOverlap { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            let Some(pair) = pair else {
                return Err(DatagenError::UnattainableOverlap {
                    target: overlap_range.0,
                    scene_size: scene.nodes.len(),
                });
            };
            let g1_rel = format!("scenes/s{scene_idx:04}_p{pair_idx}_a.json");
            let g2_rel = format!("scenes/s{scene_idx:04}_p{pair_idx}_b.json");
            save_scene_graph(&pair.g1, &out_dir.join(&g1_rel))?;
            save_scene_graph(&pair.g2, &out_dir.join(&g2_rel))?;
            entries.push(ManifestEntry {
                g1: g1_rel,
                g2: g2_rel,
                matches: pair.gt_matches.clone(),
                overlap: pair.overlap_ratio,
                transform: pair.transform.flat(),
                split,
            });
        }
    }

    let manifest = CorpusManifest { entries };
    let mut text = String::new();
    for e in &manifest.entries {
        text.push_str(&manifest_line(e));
        text.push('\n');
    }
    std::fs::write(out_dir.join("manifest.jsonl"), text)?;
    Ok(manifest)
}

#[derive(Deserialize)]
struct RawEntry {
    g1: String,
    g2: String,
    matches: Vec<(u64, u64)>,
    overlap: f32,
    transform: Vec<f32>,
    split: String,
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest, DatagenError> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEntry = serde_json::from_str(line)
            .map_err(|e| DatagenError::ManifestParse(lineno + 1, e.to_string()))?;
        if raw.transform.len() != 16 {
            return Err(DatagenError::ManifestParse(
                lineno + 1,
                format!("transform has {} entries, expected 16", raw.transform.len()),
            ));
        }
        let split = match raw.split.as_str() {
            "train" => Split::Train,
            "val" => Split::Val,
            other => {
                return Err(DatagenError::ManifestParse(
                    lineno + 1,
                    format!("unknown split {other:?}"),
                ))
            }
        };
        let mut transform = [0.0f32; 16];
        transform.copy_from_slice(&raw.transform);
        entries.push(ManifestEntry {
            g1: raw.g1,
            g2: raw.g2,
            matches: raw.matches,
            overlap: raw.overlap,
            transform,
            split,
        });
    }
    Ok(CorpusManifest { entries })
}

/// Directory containing a manifest file: scene paths resolve against it.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegraph::load_scene_graph;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("sgalign_corpus_{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_config() -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            object_count: (8, 10),
            points_per_object: 40,
            ..SyntheticSceneConfig::default()
        }
    }

    #[test]
    fn single_scene_manifest_round_trips() {
        let dir = tmp_dir("single");
        let m = generate_corpus(&small_config(), 1, 1, (0.3, 0.7), 11, &dir, false).unwrap();
        assert_eq!(m.entries.len(), 1);
        let loaded = load_manifest(&dir.join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.entries.len(), 1);
        let e = &loaded.entries[0];
        assert_eq!(e.g1, m.entries[0].g1);
        assert_eq!(e.matches, m.entries[0].matches);
        let g1 = load_scene_graph(&dir.join(&e.g1)).unwrap();
        assert!(g1.validate().is_ok());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn same_seed_gives_identical_manifest_bytes() {
        let dir_a = tmp_dir("det_a");
        let dir_b = tmp_dir("det_b");
        generate_corpus(&small_config(), 3, 2, (0.1, 0.9), 21, &dir_a, false).unwrap();
        generate_corpus(&small_config(), 3, 2, (0.1, 0.9), 21, &dir_b, false).unwrap();
        let a = std::fs::read(dir_a.join("manifest.jsonl")).unwrap();
        let b = std::fs::read(dir_b.join("manifest.jsonl")).unwrap();
        assert_eq!(a, b);
        // scene files byte-identical too
        let entry = load_manifest(&dir_a.join("manifest.jsonl")).unwrap();
        let p = &entry.entries[0].g1;
        assert_eq!(
            std::fs::read(dir_a.join(p)).unwrap(),
            std::fs::read(dir_b.join(p)).unwrap()
        );
        std::fs::remove_dir_all(&dir_a).unwrap();
        std::fs::remove_dir_all(&dir_b).unwrap();
    }

    #[test]
    fn declared_overlap_matches_recomputation_from_matches() {
        let dir = tmp_dir("overlap");
        let m = generate_corpus(&small_config(), 4, 2, (0.2, 0.8), 31, &dir, false).unwrap();
        for e in &m.entries {
            let g1 = load_scene_graph(&dir.join(&e.g1)).unwrap();
            let g2 = load_scene_graph(&dir.join(&e.g2)).unwrap();
            let shared = e.matches.len();
            let union = g1.nodes.len() + g2.nodes.len() - shared;
            let recomputed = shared as f32 / union as f32;
            assert!(
                (recomputed - e.overlap).abs() < 1e-6,
                "declared {} vs recomputed {recomputed}",
                e.overlap
            );
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn split_assignment_is_by_scene() {
        let dir = tmp_dir("split");
        let m = generate_corpus(&small_config(), 12, 2, (0.3, 0.7), 41, &dir, false).unwrap();
        // all pairs of one scene share a split
        for chunk in m.entries.chunks(2) {
            assert_eq!(chunk[0].split, chunk[1].split);
        }
        let val = m.val_entries().count();
        assert!(val > 0, "expected some validation scenes");
        assert!(val < m.entries.len(), "expected some training scenes");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
