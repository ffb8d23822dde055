//! End-to-end training: pair sampling, modality dropout, contrastive
//! optimization with AdamW and cosine annealing, checkpointing and logging.
//! Also the evaluation harness (masked, binned, micro-averaged) and the
//! per-modality runtime/memory benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngExt;
use thiserror::Error;

use crate::alignment::{similarity_matrix, AlignError, EvalReport, RigidTransform};
use crate::datagen::{
    manifest_root, simulate_predicted, undo_transform, CorpusManifest, NoiseConfig, ScenePair,
    Split,
};
use crate::encoders::{canonicalize_points, fps, TextEmbeddingProvider};
use crate::fusion::{
    embed_scene_tensors, EmbedOptions, FusionError, NodeMaskOverride,
};
use crate::losses::{total_loss, BatchEmbeds, LossConfig, LossError, PairEmbed, TermReport};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{adamw_step, cosine_lr, seeded_rng, CheckpointError, Graph, OptimizerState};
use crate::scenegraph::{load_scene_graph, ModalityKind, ModalityMask, SceneGraphError};

pub const ALLOWED_POINT_RESOLUTIONS: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scene pairs per optimizer step.
    pub batch_size: usize,
    pub base_lr: f32,
    pub min_lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Chance to mask each present modality, per modality per scene.
    pub modality_dropout_prob: f32,
    /// Chance that a scene instead keeps exactly one modality (or the
    /// caption+referral pair), training the heavily-masked path directly.
    pub single_modality_prob: f32,
    pub point_resolution: usize,
    pub mesh_samples: usize,
    pub embed_dim: usize,
    pub hidden_width: usize,
    pub temperature: f32,
    /// Keep this many most recent per-epoch checkpoints.
    pub checkpoint_retention: usize,
    /// Draw fresh mesh surface samples every epoch (augmentation); when
    /// off, sampling seeds depend only on the pair.
    pub resample_mesh_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            base_lr: 1e-3,
            min_lr: 0.0,
            weight_decay: 0.01,
            seed: 0,
            modality_dropout_prob: 0.15,
            single_modality_prob: 0.0,
            point_resolution: 512,
            mesh_samples: 2048,
            embed_dim: 512,
            hidden_width: 128,
            temperature: crate::losses::DEFAULT_TEMPERATURE,
            checkpoint_retention: 5,
            resample_mesh_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.modality_dropout_prob) {
            return Err(TrainError::InvalidConfig(
                "modality dropout must be in [0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.single_modality_prob) {
            return Err(TrainError::InvalidConfig(
                "single-modality probability must be in [0, 1)".into(),
            ));
        }
        if !ALLOWED_POINT_RESOLUTIONS.contains(&self.point_resolution) {
            return Err(TrainError::InvalidConfig(format!(
                "point resolution {} not in {:?}",
                self.point_resolution, ALLOWED_POINT_RESOLUTIONS
            )));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty training split")]
    EmptyTrainingSplit,
    #[error("loss diverged (non-finite) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    SceneGraph(#[from] SceneGraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("evaluation mask {0} leaves no usable modality")]
    EmptyEvalMask(String),
}

/// A corpus pair in memory, with its split tag.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub pair: ScenePair,
    pub split: Split,
}

/// Load every manifest entry's scene files.
pub fn load_pairs(
    manifest: &CorpusManifest,
    manifest_path: &Path,
) -> Result<Vec<LoadedPair>, TrainError> {
    let root = manifest_root(manifest_path);
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let g1 = load_scene_graph(&root.join(&e.g1))?;
        let g2 = load_scene_graph(&root.join(&e.g2))?;
        out.push(LoadedPair {
            pair: ScenePair {
                g1,
                g2,
                gt_matches: e.matches.clone(),
                overlap_ratio: e.overlap,
                transform: RigidTransform::from_flat(&e.transform),
            },
            split: e.split,
        });
    }
    Ok(out)
}

/// Replace each node's raw cloud by its fps-downsampled, canonicalized
/// form and cache provider text vectors on the nodes, so per-epoch encoding
/// skips redundant resampling and re-hashing. Bounding boxes keep the
/// original world-frame values (structure features rely on them); the
/// stored points are no longer in the world frame afterwards.
pub fn prepare_training_clouds(
    pairs: &mut [LoadedPair],
    k: usize,
    provider: &TextEmbeddingProvider,
) -> Result<(), TrainError> {
    for lp in pairs.iter_mut() {
        for scene in [&mut lp.pair.g1, &mut lp.pair.g2] {
            for node in scene.nodes.iter_mut() {
                if !node.points.is_empty() {
                    let idx = fps(&node.points, k).expect("non-empty cloud");
                    let sub: Vec<[f32; 3]> = idx.into_iter().map(|i| node.points[i]).collect();
                    node.points = canonicalize_points(&sub);
                }
                if node.text_embedding.is_none() {
                    if let Some(caption) = &node.caption {
                        node.text_embedding = Some(
                            provider
                                .caption_vec(node.id, caption)
                                .map_err(FusionError::Text)?,
                        );
                    }
                }
                if node.referral_embeddings.is_none() && !node.referrals.is_empty() {
                    node.referral_embeddings = Some(
                        provider
                            .referral_vecs(node.id, &node.referrals)
                            .map_err(FusionError::Text)?,
                    );
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f32,
    pub total: f32,
    /// Raw term values in fixed order: icl_joint, then icl/ial per modality.
    pub terms: [f32; 11],
}

pub const TERM_COLUMNS: [&str; 11] = [
    "icl_joint", "icl_P", "ial_P", "icl_M", "ial_M", "icl_S", "ial_S", "icl_T", "ial_T", "icl_R",
    "ial_R",
];

fn term_index(name: &str) -> usize {
    TERM_COLUMNS
        .iter()
        .position(|c| *c == name)
        .unwrap_or_else(|| panic!("unknown loss term {name}"))
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub history: Vec<HistoryRow>,
    pub final_checkpoint: Option<PathBuf>,
    /// Mean total loss per epoch.
    pub epoch_means: Vec<f32>,
}

/// Modalities to drop for one scene: with `single_prob` the scene keeps
/// exactly one modality (or the caption+referral pair) and drops the rest;
/// otherwise each modality is dropped independently with `prob`.
fn scene_dropout_mask(
    rng: &mut rand_chacha::ChaCha8Rng,
    prob: f32,
    single_prob: f32,
) -> ModalityMask {
    if rng.random_range(0.0f32..1.0) < single_prob {
        let keep = match rng.random_range(0u32..6) {
            0 => ModalityMask::EMPTY.with(ModalityKind::PointCloud),
            1 => ModalityMask::EMPTY.with(ModalityKind::Mesh),
            2 => ModalityMask::EMPTY.with(ModalityKind::Structure),
            3 => ModalityMask::EMPTY.with(ModalityKind::Caption),
            4 => ModalityMask::EMPTY.with(ModalityKind::Referral),
            _ => ModalityMask::EMPTY
                .with(ModalityKind::Caption)
                .with(ModalityKind::Referral),
        };
        let mut dropped = ModalityMask::EMPTY;
        for k in ModalityKind::ALL {
            if !keep.contains(k) {
                dropped = dropped.with(k);
            }
        }
        return dropped;
    }
    let mut dropped = ModalityMask::EMPTY;
    for k in ModalityKind::ALL {
        if rng.random_range(0.0f32..1.0) < prob {
            dropped = dropped.with(k);
        }
    }
    dropped
}

/// Per-node dropout overrides honoring "never remove the last modality":
/// modalities are dropped in fixed order only while the node keeps at least
/// one other usable modality.
fn dropout_overrides(
    scene: &crate::scenegraph::SceneGraph,
    scene_dropped: ModalityMask,
    structure_available: bool,
) -> NodeMaskOverride {
    let mut overrides = NodeMaskOverride::new();
    if scene_dropped.is_empty() {
        return overrides;
    }
    for node in &scene.nodes {
        let mut present = node.payload_mask();
        if structure_available {
            present = present.with(ModalityKind::Structure);
        }
        let mut dropped_here = ModalityMask::EMPTY;
        for k in ModalityKind::ALL {
            if !scene_dropped.contains(k) || !present.contains(k) {
                continue;
            }
            if present.count() > 1 {
                present = present.without(k);
                dropped_here = dropped_here.with(k);
            }
        }
        if !dropped_here.is_empty() {
            overrides.insert(node.id, dropped_here);
        }
    }
    overrides
}

/// Train a fresh model on the training split. Deterministic given the
/// corpus, configuration and provider (single-threaded).
pub fn train(
    pairs: &[LoadedPair],
    cfg: &TrainConfig,
    provider: &TextEmbeddingProvider,
    out_dir: Option<&Path>,
    quiet: bool,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let mut train_pairs: Vec<LoadedPair> = pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .cloned()
        .collect();
    if train_pairs.is_empty() {
        return Err(TrainError::EmptyTrainingSplit);
    }
    prepare_training_clouds(&mut train_pairs, cfg.point_resolution, provider)?;

    let mut model = ModelParams::init(
        ModelConfig {
            embed_dim: cfg.embed_dim,
            hidden_width: cfg.hidden_width,
            text_dim: provider.dim(),
            ..ModelConfig::default()
        },
        cfg.seed,
    );
    let mut opt = OptimizerState::new(
        model.store.len(),
        cfg.base_lr,
        cfg.weight_decay,
        cfg.epochs,
    );
    let loss_cfg = LossConfig {
        temperature: cfg.temperature,
        tau_joint: cfg.temperature,
        tau_uni: cfg.temperature,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
    }

    let mut history: Vec<HistoryRow> = Vec::new();
    let mut epoch_means: Vec<f32> = Vec::new();
    let mut epoch_term_rows: Vec<(usize, Vec<TermReport>)> = Vec::new();
    let mut kept_checkpoints: Vec<PathBuf> = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.min_lr);
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        let mut shuffle_rng = seeded_rng(cfg.seed, 0xe0_0000 + epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss_sum = 0.0f64;
        let mut epoch_steps = 0usize;
        let mut epoch_terms: BTreeMap<String, (f64, f64, f64, usize)> = BTreeMap::new();

        for (step, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
            let graph = Graph::new();
            let views = model.bind(&graph);
            let mut batch = BatchEmbeds { pairs: Vec::new() };

            for &pi in batch_ids {
                let lp = &train_pairs[pi];
                let drop_stream = 0xd0_0000u64
                    .wrapping_add((epoch as u64) << 24)
                    .wrapping_add(pi as u64);
                let mut drop_rng = seeded_rng(cfg.seed, drop_stream);
                let mut embedded = Vec::with_capacity(2);
                for (side, scene) in [&lp.pair.g1, &lp.pair.g2].into_iter().enumerate() {
                    let dropped = scene_dropout_mask(
                        &mut drop_rng,
                        cfg.modality_dropout_prob,
                        cfg.single_modality_prob,
                    );
                    let structure_available = !scene.edges.is_empty() || scene.nodes.len() >= 2;
                    let overrides = dropout_overrides(scene, dropped, structure_available);
                    let epoch_part = if cfg.resample_mesh_each_epoch {
                        (epoch as u64) << 24
                    } else {
                        0
                    };
                    let opts = EmbedOptions {
                        allowed: ModalityMask::ALL,
                        point_resolution: cfg.point_resolution,
                        mesh_samples: cfg.mesh_samples,
                        mesh_seed: cfg
                            .seed
                            .wrapping_mul(31)
                            .wrapping_add(epoch_part)
                            .wrapping_add((pi as u64) << 2)
                            .wrapping_add(side as u64),
                        provider,
                    };
                    embedded.push(embed_scene_tensors(
                        &graph,
                        &views,
                        scene,
                        &opts,
                        Some(&overrides),
                        model.config.leaky_slope,
                    )?);
                }
                let (e2, e1) = (embedded.pop().unwrap(), embedded.pop().unwrap());
                let pos1: BTreeMap<u64, usize> = e1
                    .node_ids
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| (id, i))
                    .collect();
                let pos2: BTreeMap<u64, usize> = e2
                    .node_ids
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| (id, i))
                    .collect();
                for &(a, b) in &lp.pair.gt_matches {
                    let (Some(&ia), Some(&ib)) = (pos1.get(&a), pos2.get(&b)) else {
                        continue;
                    };
                    batch.pairs.push(PairEmbed {
                        joint: (e1.joint[ia], e2.joint[ib]),
                        unimodal: std::array::from_fn(|k| {
                            (e1.unimodal[ia][k], e2.unimodal[ib][k])
                        }),
                    });
                }
            }

            if batch.pairs.len() < 2 {
                continue;
            }
            let (loss, reports) = total_loss(&graph, &views, &batch, &loss_cfg)?;
            let total = loss.item();
            if !total.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            graph.backward(loss);
            let grads = views
                .theta
                .grad()
                .unwrap_or_else(|| vec![0.0; model.store.len()]);
            adamw_step(&mut model.store.values, &grads, lr, &mut opt);

            let mut terms = [0.0f32; 11];
            for r in &reports {
                terms[term_index(&r.name)] = r.raw;
                let slot = epoch_terms.entry(r.name.clone()).or_insert((0.0, 0.0, 0.0, 0));
                slot.0 += r.raw as f64;
                slot.1 += r.weight as f64;
                slot.2 += r.weighted as f64;
                slot.3 += 1;
            }
            history.push(HistoryRow {
                epoch,
                step,
                lr,
                total,
                terms,
            });
            epoch_loss_sum += total as f64;
            epoch_steps += 1;
        }

        let mean = if epoch_steps == 0 {
            f32::NAN
        } else {
            (epoch_loss_sum / epoch_steps as f64) as f32
        };
        epoch_means.push(mean);
        let term_reports: Vec<TermReport> = epoch_terms
            .into_iter()
            .map(|(name, (raw, weight, weighted, n))| TermReport {
                name,
                raw: (raw / n as f64) as f32,
                weight: (weight / n as f64) as f32,
                weighted: (weighted / n as f64) as f32,
            })
            .collect();
        epoch_term_rows.push((epoch, term_reports));

        if !quiet {
            eprintln!(
                "epoch {epoch:3}: lr {lr:.6}, mean loss {mean:.5} ({epoch_steps} steps)"
            );
        }
        if opt.zero_grad_steps > 0 && !quiet {
            eprintln!("  note: {} steps saw all-zero gradients", opt.zero_grad_steps);
        }

        if let Some(dir) = out_dir {
            let path = dir.join("checkpoints").join(format!("epoch_{epoch:03}.sgpp"));
            model.save(&path)?;
            kept_checkpoints.push(path);
            while kept_checkpoints.len() > cfg.checkpoint_retention {
                let old = kept_checkpoints.remove(0);
                let _ = std::fs::remove_file(old);
            }
        }
    }

    let mut final_checkpoint = None;
    if let Some(dir) = out_dir {
        let path = dir.join("checkpoints").join("final.sgpp");
        model.save(&path)?;
        final_checkpoint = Some(path);
        std::fs::write(dir.join("history.csv"), history_csv(&history))?;
        std::fs::write(dir.join("loss_terms.csv"), terms_csv(&epoch_term_rows))?;
    }

    Ok(TrainOutput {
        params: model,
        history,
        final_checkpoint,
        epoch_means,
    })
}

/// Loss history CSV: epoch, step, lr, total, one raw column per term.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,step,lr,total");
    for c in TERM_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for row in history {
        let _ = write!(out, "{},{},{:.6},{:.6}", row.epoch, row.step, row.lr, row.total);
        for t in row.terms {
            let _ = write!(out, ",{t:.6}");
        }
        out.push('\n');
    }
    out
}

/// Per-epoch loss report CSV: epoch, term name, raw value, weight, weighted.
pub fn terms_csv(rows: &[(usize, Vec<TermReport>)]) -> String {
    let mut out = String::from("epoch,term,raw,weight,weighted\n");
    for (epoch, reports) in rows {
        for r in reports {
            let _ = write!(
                out,
                "{},{},{:.6},{:.6},{:.6}\n",
                epoch, r.name, r.raw, r.weight, r.weighted
            );
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformMode {
    /// Evaluate the corpus exactly as stored (random transforms baked in).
    AsRecorded,
    /// Pull the second fragment back into the first frame: the T = I4 setting.
    Identity,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub transform: TransformMode,
    pub point_resolution: usize,
    pub mesh_samples: usize,
    pub mask_src: ModalityMask,
    pub mask_ref: ModalityMask,
    pub match_threshold: f32,
    pub with_bins: bool,
    /// Apply segmentation-noise simulation to every pair before embedding.
    pub predicted: Option<NoiseConfig>,
    pub noise_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            transform: TransformMode::AsRecorded,
            point_resolution: 512,
            mesh_samples: 2048,
            mask_src: ModalityMask::ALL,
            mask_ref: ModalityMask::ALL,
            match_threshold: crate::alignment::DEFAULT_MATCH_THRESHOLD,
            with_bins: false,
            predicted: None,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BinStat {
    pub lo: f32,
    pub hi: f32,
    pub mean_rr: f32,
    pub correspondences: usize,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub bins: Vec<BinStat>,
    /// Chance level for Hits@1: mean of 1/N2 over evaluated pairs.
    pub chance_hits1: f32,
    pub pair_count: usize,
    pub correspondence_count: usize,
    /// Mean alignment score over pairs.
    pub mean_xi: f32,
}

struct PairEval {
    ranks: Vec<usize>,
    n2: usize,
    overlap: f32,
    xi: f32,
}

fn eval_one_pair(
    params: &ModelParams,
    lp: &LoadedPair,
    opts: &EvalOptions,
    provider: &TextEmbeddingProvider,
    pair_index: usize,
) -> Result<PairEval, TrainError> {
    if opts.mask_src.is_empty() || opts.mask_ref.is_empty() {
        return Err(TrainError::EmptyEvalMask("(empty)".to_string()));
    }
    let mut pair = lp.pair.clone();
    if let Some(noise) = &opts.predicted {
        pair = simulate_predicted(&pair, noise, opts.noise_seed ^ (pair_index as u64) << 8);
    }
    if opts.transform == TransformMode::Identity {
        pair = undo_transform(&pair);
    }

    let g = Graph::new();
    let views = params.bind(&g);
    // one sampling seed for both fragments: identical meshes then sample
    // corresponding surface points, so mesh features differ only by the
    // rigid transform rather than by Monte Carlo noise
    let embed = |scene, mask| {
        let eo = EmbedOptions {
            allowed: mask,
            point_resolution: opts.point_resolution,
            mesh_samples: opts.mesh_samples,
            mesh_seed: 0x9999 ^ (pair_index as u64) << 4,
            provider,
        };
        embed_scene_tensors(&g, &views, scene, &eo, None, params.config.leaky_slope)
    };
    let e1 = embed(&pair.g1, opts.mask_src)?;
    let e2 = embed(&pair.g2, opts.mask_ref)?;
    let set1 = crate::fusion::NodeEmbeddingSet {
        node_ids: e1.node_ids.clone(),
        masks: e1.masks.clone(),
        unimodal: vec![std::array::from_fn(|_| None); e1.node_ids.len()],
        joint: e1.joint.iter().map(|t| t.value()).collect(),
    };
    let set2 = crate::fusion::NodeEmbeddingSet {
        node_ids: e2.node_ids.clone(),
        masks: e2.masks.clone(),
        unimodal: vec![std::array::from_fn(|_| None); e2.node_ids.len()],
        joint: e2.joint.iter().map(|t| t.value()).collect(),
    };
    let s = similarity_matrix(&set1, &set2)?;

    let col_index: BTreeMap<u64, usize> = s
        .col_ids
        .iter()
        .enumerate()
        .map(|(j, &id)| (id, j))
        .collect();
    let row_index: BTreeMap<u64, usize> = s
        .row_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let mut ranks = Vec::with_capacity(pair.gt_matches.len());
    for &(a, b) in &pair.gt_matches {
        let (Some(&i), Some(&j)) = (row_index.get(&a), col_index.get(&b)) else {
            continue;
        };
        let target = s.at(i, j);
        let mut rank = 1usize;
        for c in 0..s.col_ids.len() {
            if c != j && s.at(i, c) >= target {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    let xi = crate::alignment::alignment_score(&s, opts.match_threshold);
    Ok(PairEval {
        ranks,
        n2: pair.g2.nodes.len(),
        overlap: pair.overlap_ratio,
        xi,
    })
}

fn worker_count() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("SGPP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(available);
    available.min(cap).max(1)
}

/// Micro-averaged node-matching metrics over all ground-truth
/// correspondences of the given pairs, with per-overlap-bin breakdown.
/// Pairs are processed in parallel (capped by `SGPP_THREADS`) and reduced
/// in pair order, so the result is thread-count independent.
pub fn evaluate(
    params: &ModelParams,
    pairs: &[LoadedPair],
    opts: &EvalOptions,
    provider: &TextEmbeddingProvider,
) -> Result<EvalSummary, TrainError> {
    if opts.mask_src.is_empty() || opts.mask_ref.is_empty() {
        return Err(TrainError::EmptyEvalMask(format!(
            "src={} ref={}",
            opts.mask_src, opts.mask_ref
        )));
    }
    let workers = worker_count().min(pairs.len().max(1));
    let mut slots: Vec<Option<Result<PairEval, TrainError>>> =
        (0..pairs.len()).map(|_| None).collect();
    if workers <= 1 {
        for (i, lp) in pairs.iter().enumerate() {
            slots[i] = Some(eval_one_pair(params, lp, opts, provider, i));
        }
    } else {
        let chunk = pairs.len().div_ceil(workers);
        let results: Vec<Vec<(usize, Result<PairEval, TrainError>)>> =
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for w in 0..workers {
                    let lo = w * chunk;
                    let hi = ((w + 1) * chunk).min(pairs.len());
                    if lo >= hi {
                        continue;
                    }
                    let pairs_ref = &pairs[lo..hi];
                    handles.push(scope.spawn(move || {
                        pairs_ref
                            .iter()
                            .enumerate()
                            .map(|(off, lp)| {
                                let i = lo + off;
                                (i, eval_one_pair(params, lp, opts, provider, i))
                            })
                            .collect::<Vec<_>>()
                    }));
                }
                handles.into_iter().map(|h| h.join().expect("eval worker")).collect()
            });
        for bucket in results {
            for (i, r) in bucket {
                slots[i] = Some(r);
            }
        }
    }

    let mut all_ranks: Vec<usize> = Vec::new();
    let mut bins: Vec<(f32, f32, Vec<usize>)> = (0..8)
        .map(|i| (0.1 + 0.1 * i as f32, 0.2 + 0.1 * i as f32, Vec::new()))
        .collect();
    let mut chance_sum = 0.0f64;
    let mut xi_sum = 0.0f64;
    let mut pair_count = 0usize;
    for slot in slots {
        let pe = slot.expect("all slots filled")?;
        pair_count += 1;
        chance_sum += 1.0 / pe.n2 as f64;
        xi_sum += pe.xi as f64;
        for bin in bins.iter_mut() {
            let upper_inclusive = (bin.1 - 0.9).abs() < 1e-6;
            if pe.overlap >= bin.0 && (pe.overlap < bin.1 || (upper_inclusive && pe.overlap <= bin.1))
            {
                bin.2.extend(&pe.ranks);
            }
        }
        all_ranks.extend(pe.ranks);
    }

    let n = all_ranks.len().max(1) as f32;
    let mean_rr = all_ranks.iter().map(|&r| 1.0 / r as f32).sum::<f32>() / n;
    let hits = |k: usize| all_ranks.iter().filter(|&&r| r <= k).count() as f32 / n;
    let report = EvalReport {
        mean_rr,
        hits_at_1: hits(1),
        hits_at_3: hits(3),
        hits_at_5: hits(5),
        precision: None,
        recall: None,
        f1: None,
    };
    report.assert_invariants();

    let bins = if opts.with_bins {
        bins.into_iter()
            .filter(|(_, _, ranks)| !ranks.is_empty())
            .map(|(lo, hi, ranks)| BinStat {
                lo,
                hi,
                mean_rr: ranks.iter().map(|&r| 1.0 / r as f32).sum::<f32>() / ranks.len() as f32,
                correspondences: ranks.len(),
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(EvalSummary {
        report,
        bins,
        chance_hits1: (chance_sum / pair_count.max(1) as f64) as f32,
        pair_count,
        correspondence_count: all_ranks.len(),
        mean_xi: (xi_sum / pair_count.max(1) as f64) as f32,
    })
}

/// Alignment scores (and overlap labels) per pair, for overlap-check suites.
pub fn alignment_scores(
    params: &ModelParams,
    pairs: &[LoadedPair],
    opts: &EvalOptions,
    provider: &TextEmbeddingProvider,
) -> Result<Vec<f32>, TrainError> {
    let mut out = Vec::with_capacity(pairs.len());
    for (i, lp) in pairs.iter().enumerate() {
        out.push(eval_one_pair(params, lp, opts, provider, i)?.xi);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub modalities: String,
    pub runtime_ms_mean: f32,
    pub runtime_ms_std: f32,
    pub memory_mb_mean: f32,
    pub memory_mb_std: f32,
}

/// Cumulative modality subsets in benchmark order.
pub fn cumulative_subsets() -> Vec<ModalityMask> {
    ["P", "PM", "PMS", "PMST", "PMSTR"]
        .into_iter()
        .map(|s| ModalityMask::parse(s).expect("static masks"))
        .collect()
}

/// Mean per-pair inference wall time and peak embedding-buffer bytes for
/// each modality subset, over `runs` repetitions.
pub fn bench_modalities(
    params: &ModelParams,
    pairs: &[LoadedPair],
    subsets: &[ModalityMask],
    runs: usize,
    opts: &EvalOptions,
    provider: &TextEmbeddingProvider,
) -> Result<Vec<BenchRow>, TrainError> {
    assert!(runs >= 1);
    let mut per_subset_ms: Vec<Vec<f32>> = vec![Vec::with_capacity(runs); subsets.len()];
    let mut per_subset_mb: Vec<Vec<f32>> = vec![Vec::with_capacity(runs); subsets.len()];
    // one untimed warm-up round, then measured rounds; subsets interleave
    // round-robin so clock drift hits all of them equally
    for run in 0..=runs {
        let warmup = run == 0;
        for (si, mask) in subsets.iter().enumerate() {
            let t0 = Instant::now();
            let mut peak_bytes = 0usize;
            for (i, lp) in pairs.iter().enumerate() {
                let g = Graph::new();
                let views = params.bind(&g);
                let eo = EmbedOptions {
                    allowed: *mask,
                    point_resolution: opts.point_resolution,
                    mesh_samples: opts.mesh_samples,
                    mesh_seed: 0xbe9c ^ i as u64,
                    provider,
                };
                let e1 = embed_scene_tensors(&g, &views, &lp.pair.g1, &eo, None, params.config.leaky_slope)?;
                let e2 = embed_scene_tensors(&g, &views, &lp.pair.g2, &eo, None, params.config.leaky_slope)?;
                let set1 = crate::fusion::NodeEmbeddingSet {
                    node_ids: e1.node_ids.clone(),
                    masks: e1.masks.clone(),
                    unimodal: vec![std::array::from_fn(|_| None); e1.node_ids.len()],
                    joint: e1.joint.iter().map(|t| t.value()).collect(),
                };
                let set2 = crate::fusion::NodeEmbeddingSet {
                    node_ids: e2.node_ids.clone(),
                    masks: e2.masks.clone(),
                    unimodal: vec![std::array::from_fn(|_| None); e2.node_ids.len()],
                    joint: e2.joint.iter().map(|t| t.value()).collect(),
                };
                let s = similarity_matrix(&set1, &set2)?;
                let _ = crate::alignment::match_nodes(&s, opts.match_threshold);
                peak_bytes = peak_bytes.max(g.buffer_bytes());
            }
            if warmup {
                continue;
            }
            let elapsed = t0.elapsed().as_secs_f64() * 1000.0;
            per_subset_ms[si].push((elapsed / pairs.len().max(1) as f64) as f32);
            per_subset_mb[si].push(peak_bytes as f32 / (1024.0 * 1024.0));
        }
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    let std = |v: &[f32], m: f32| {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / v.len() as f32).sqrt()
    };
    let mut rows = Vec::with_capacity(subsets.len());
    for (si, mask) in subsets.iter().enumerate() {
        let ms_mean = mean(&per_subset_ms[si]);
        let mb_mean = mean(&per_subset_mb[si]);
        rows.push(BenchRow {
            modalities: mask.to_string(),
            runtime_ms_mean: ms_mean,
            runtime_ms_std: std(&per_subset_ms[si], ms_mean),
            memory_mb_mean: mb_mean,
            memory_mb_std: std(&per_subset_mb[si], mb_mean),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("modalities,runtime_ms_mean,runtime_ms_std,memory_mb_mean,memory_mb_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:.6},{:.6}",
            r.modalities, r.runtime_ms_mean, r.runtime_ms_std, r.memory_mb_mean, r.memory_mb_std
        );
    }
    out
}

/// Eval summary as JSON (mean_rr, hits, bins, chance, xi).
pub fn eval_json(summary: &EvalSummary, transform_tag: &str) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "{{\"transform\":\"{}\",\"mean_rr\":{:.6},\"hits\":{{\"1\":{:.6},\"3\":{:.6},\"5\":{:.6}}},\"chance_hits1\":{:.6},\"mean_xi\":{:.6},\"pairs\":{},\"correspondences\":{},\"bins\":[",
        transform_tag,
        summary.report.mean_rr,
        summary.report.hits_at_1,
        summary.report.hits_at_3,
        summary.report.hits_at_5,
        summary.chance_hits1,
        summary.mean_xi,
        summary.pair_count,
        summary.correspondence_count,
    );
    for (i, b) in summary.bins.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(
            out,
            "{{\"overlap\":[{:.1},{:.1}],\"mean_rr\":{:.6},\"correspondences\":{}}}",
            b.lo, b.hi, b.mean_rr, b.correspondences
        );
    }
    out.push_str("]}");
    out
}
