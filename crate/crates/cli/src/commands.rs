//! Command implementations over the core library.

use std::fmt::Write as _;
use std::path::Path;

use sgalign_core::alignment::{
    alignment_score, build_unified_graph, match_nodes, similarity_matrix, MatchSet, Provenance,
    DEFAULT_MATCH_THRESHOLD,
};
use sgalign_core::datagen::{
    generate_corpus, load_manifest, NoiseConfig, Split, SyntheticSceneConfig,
};
use sgalign_core::encoders::{load_embeddings, TextEmbeddingProvider};
use sgalign_core::fusion::{embed_scene, EmbedOptions};
use sgalign_core::model::ModelParams;
use sgalign_core::scenegraph::{load_scene_graph, to_canonical_json, ModalityMask, SceneGraph};
use sgalign_core::training::{
    bench_csv, bench_modalities, cumulative_subsets, eval_json, evaluate, load_pairs, train,
    EvalOptions, LoadedPair, TrainConfig, TransformMode,
};

use crate::fileconfig::{load_file_config, pick, FileConfig};
use crate::{
    AblateArgs, AlignArgs, BenchArgs, Cli, CliError, Command, EvalArgs, GenDataArgs, TrainArgs,
};

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file_cfg = match &cli.config {
        Some(path) => load_file_config(path).map_err(validation)?,
        None => FileConfig::default(),
    };
    let seed = pick(cli.seed, file_cfg.seed, 0);
    match &cli.command {
        Command::GenData(args) => gen_data(&cli, &file_cfg, seed, args),
        Command::Train(args) => do_train(&cli, &file_cfg, seed, args),
        Command::Align(args) => do_align(&file_cfg, args),
        Command::Eval(args) => do_eval(&file_cfg, args),
        Command::Bench(args) => do_bench(&file_cfg, args),
        Command::Ablate(args) => do_ablate(&file_cfg, args),
    }
}

fn write_or_print(path: Option<&Path>, content: &str) -> Result<(), CliError> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(runtime)?;
                }
            }
            std::fs::write(p, content).map_err(runtime)
        }
        None => {
            println!("{content}");
            Ok(())
        }
    }
}

fn gen_data(
    cli: &Cli,
    file_cfg: &FileConfig,
    seed: u64,
    args: &GenDataArgs,
) -> Result<(), CliError> {
    let scenes = pick(args.scenes, file_cfg.scenes, 20);
    let pairs_per_scene = pick(args.pairs_per_scene, file_cfg.pairs_per_scene, 3);
    let overlap_min = pick(args.overlap_min, file_cfg.overlap_min, 0.1);
    let overlap_max = pick(args.overlap_max, file_cfg.overlap_max, 0.9);
    let mut config = SyntheticSceneConfig::default();
    config.object_count = (
        pick(args.objects_min, file_cfg.objects_min, config.object_count.0),
        pick(args.objects_max, file_cfg.objects_max, config.object_count.1),
    );
    config.points_per_object = pick(
        args.points_per_object,
        file_cfg.points_per_object,
        config.points_per_object,
    );
    config.point_noise_sigma = pick(
        args.point_noise_sigma,
        file_cfg.point_noise_sigma,
        config.point_noise_sigma,
    );
    if scenes == 0 || pairs_per_scene == 0 {
        return Err(validation("scenes and pairs-per-scene must be positive"));
    }
    let manifest = generate_corpus(
        &config,
        scenes,
        pairs_per_scene,
        (overlap_min, overlap_max),
        seed,
        &cli.out_dir,
        args.identity_transform,
    )
    .map_err(runtime)?;
    if !cli.quiet {
        eprintln!(
            "wrote {} pairs ({} train, {} val) under {}",
            manifest.entries.len(),
            manifest.train_entries().count(),
            manifest.val_entries().count(),
            cli.out_dir.display()
        );
    }
    Ok(())
}

fn load_provider(path: Option<&Path>) -> Result<TextEmbeddingProvider, CliError> {
    match path {
        Some(p) => load_embeddings(p).map_err(runtime),
        None => Ok(TextEmbeddingProvider::toy_default()),
    }
}

fn do_train(
    cli: &Cli,
    file_cfg: &FileConfig,
    seed: u64,
    args: &TrainArgs,
) -> Result<(), CliError> {
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: pick(args.epochs, file_cfg.epochs, defaults.epochs),
        batch_size: pick(args.batch_size, file_cfg.batch_size, defaults.batch_size),
        base_lr: pick(args.lr, file_cfg.lr, defaults.base_lr),
        seed,
        modality_dropout_prob: pick(
            args.dropout,
            file_cfg.dropout,
            defaults.modality_dropout_prob,
        ),
        single_modality_prob: pick(
            args.single_modality_dropout,
            file_cfg.single_modality_dropout,
            defaults.single_modality_prob,
        ),
        point_resolution: pick(
            args.point_resolution,
            file_cfg.point_resolution,
            defaults.point_resolution,
        ),
        mesh_samples: pick(args.mesh_samples, file_cfg.mesh_samples, defaults.mesh_samples),
        embed_dim: pick(args.embed_dim, file_cfg.embed_dim, defaults.embed_dim),
        hidden_width: pick(
            args.hidden_width,
            file_cfg.hidden_width,
            defaults.hidden_width,
        ),
        ..defaults
    };
    cfg.validate().map_err(|e| validation(e.to_string()))?;
    let provider = load_provider(args.embeddings.as_deref())?;
    let manifest = load_manifest(&args.manifest).map_err(runtime)?;
    let pairs = load_pairs(&manifest, &args.manifest).map_err(runtime)?;
    let out = train(&pairs, &cfg, &provider, Some(&cli.out_dir), cli.quiet).map_err(runtime)?;
    if !cli.quiet {
        if let Some(ckpt) = &out.final_checkpoint {
            eprintln!("final checkpoint: {}", ckpt.display());
        }
    }
    Ok(())
}

fn match_set_json(matches: &MatchSet, xi: f32) -> String {
    let mut out = String::from("{\"pairs\":[");
    for (i, p) in matches.pairs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(
            out,
            "{{\"src\":{},\"dst\":{},\"score\":{:.6}}}",
            p.src, p.dst, p.score
        );
    }
    let _ = write!(out, "],\"xi\":{xi:.6}}}");
    out
}

fn unified_json(
    unified: &sgalign_core::alignment::UnifiedGraph,
) -> Result<String, CliError> {
    let scene: SceneGraph = unified.to_scene_graph();
    let scene_json = to_canonical_json(&scene).map_err(runtime)?;
    let mut out = String::from("{\"provenance\":[");
    for (i, n) in unified.nodes.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        match n.provenance {
            Provenance::FromFirst(id) => {
                let _ = write!(out, "{{\"id\":{},\"from\":\"g1\",\"src\":{id}}}", n.id);
            }
            Provenance::FromSecond(id) => {
                let _ = write!(out, "{{\"id\":{},\"from\":\"g2\",\"dst\":{id}}}", n.id);
            }
            Provenance::Merged(a, b) => {
                let _ = write!(
                    out,
                    "{{\"id\":{},\"from\":\"both\",\"src\":{a},\"dst\":{b}}}",
                    n.id
                );
            }
        }
    }
    let _ = write!(out, "],\"scene\":{scene_json}}}");
    Ok(out)
}

fn do_align(file_cfg: &FileConfig, args: &AlignArgs) -> Result<(), CliError> {
    let threshold = pick(args.threshold, file_cfg.threshold, DEFAULT_MATCH_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(validation(format!("threshold {threshold} outside [0, 1]")));
    }
    let params = ModelParams::load(&args.checkpoint).map_err(runtime)?;
    let provider = load_provider(args.embeddings.as_deref())?;
    let g1 = load_scene_graph(&args.g1).map_err(runtime)?;
    let g2 = load_scene_graph(&args.g2).map_err(runtime)?;

    let opts = EmbedOptions {
        point_resolution: pick(args.point_resolution, file_cfg.point_resolution, 512),
        mesh_samples: pick(args.mesh_samples, file_cfg.mesh_samples, 2048),
        ..EmbedOptions::new(&provider)
    };
    let e1 = embed_scene(&params, &g1, &opts).map_err(runtime)?;
    let e2 = embed_scene(&params, &g2, &opts).map_err(runtime)?;
    let sim = similarity_matrix(&e1, &e2).map_err(runtime)?;
    let matches = match_nodes(&sim, threshold);
    let xi = alignment_score(&sim, threshold);

    write_or_print(args.out.as_deref(), &match_set_json(&matches, xi))?;
    if let Some(unify_path) = &args.unify {
        let unified = build_unified_graph(&g1, &g2, &matches, None).map_err(runtime)?;
        write_or_print(Some(unify_path), &unified_json(&unified)?)?;
    }
    Ok(())
}

fn split_filter(pairs: Vec<LoadedPair>, split: &str) -> Result<Vec<LoadedPair>, CliError> {
    let filtered: Vec<LoadedPair> = match split {
        "val" => pairs.into_iter().filter(|p| p.split == Split::Val).collect(),
        "train" => pairs
            .into_iter()
            .filter(|p| p.split == Split::Train)
            .collect(),
        "all" => pairs,
        other => return Err(validation(format!("unknown split {other:?}"))),
    };
    if filtered.is_empty() {
        return Err(runtime(format!("split {split:?} holds no pairs")));
    }
    Ok(filtered)
}

fn parse_mask(s: &str, flag: &str) -> Result<ModalityMask, CliError> {
    let mask = ModalityMask::parse(s)
        .ok_or_else(|| validation(format!("{flag}: cannot parse {s:?} (letters from PMSTR)")))?;
    if mask.is_empty() {
        return Err(validation(format!("{flag}: empty modality mask")));
    }
    Ok(mask)
}

fn do_eval(file_cfg: &FileConfig, args: &EvalArgs) -> Result<(), CliError> {
    let transform = match args.transform.as_str() {
        "random" => TransformMode::AsRecorded,
        "identity" => TransformMode::Identity,
        other => {
            return Err(validation(format!(
                "unknown transform {other:?} (random or identity)"
            )))
        }
    };
    let mask_src = parse_mask(&args.mask_src, "--mask-src")?;
    let mask_ref = parse_mask(&args.mask_ref, "--mask-ref")?;
    let params = ModelParams::load(&args.checkpoint).map_err(runtime)?;
    let provider = load_provider(args.embeddings.as_deref())?;
    let manifest = load_manifest(&args.manifest).map_err(runtime)?;
    let pairs = load_pairs(&manifest, &args.manifest).map_err(runtime)?;
    let pairs = split_filter(pairs, &args.split)?;

    let opts = EvalOptions {
        transform,
        point_resolution: pick(args.point_resolution, file_cfg.point_resolution, 512),
        mesh_samples: pick(args.mesh_samples, file_cfg.mesh_samples, 2048),
        mask_src,
        mask_ref,
        with_bins: true,
        predicted: args.predicted.then(NoiseConfig::default),
        ..EvalOptions::default()
    };
    let summary = evaluate(&params, &pairs, &opts, &provider).map_err(runtime)?;
    let tag = match transform {
        TransformMode::Identity => "T=I4",
        TransformMode::AsRecorded => "random",
    };
    write_or_print(args.out.as_deref(), &eval_json(&summary, tag))?;
    if let Some(csv_path) = &args.csv {
        write_or_print(Some(csv_path), &summary.report.to_csv())?;
    }
    Ok(())
}

fn do_bench(file_cfg: &FileConfig, args: &BenchArgs) -> Result<(), CliError> {
    let params = ModelParams::load(&args.checkpoint).map_err(runtime)?;
    let provider = TextEmbeddingProvider::toy_default();
    let manifest = load_manifest(&args.manifest).map_err(runtime)?;
    let pairs = load_pairs(&manifest, &args.manifest).map_err(runtime)?;
    let n = pick(args.pairs, file_cfg.pairs, 16).min(pairs.len());
    if n == 0 {
        return Err(runtime("no pairs to benchmark"));
    }
    let runs = pick(args.runs, file_cfg.runs, 5);
    let opts = EvalOptions {
        point_resolution: pick(args.point_resolution, file_cfg.point_resolution, 512),
        mesh_samples: pick(args.mesh_samples, file_cfg.mesh_samples, 2048),
        ..EvalOptions::default()
    };
    let rows = bench_modalities(
        &params,
        &pairs[..n],
        &cumulative_subsets(),
        runs,
        &opts,
        &provider,
    )
    .map_err(runtime)?;
    write_or_print(args.out.as_deref(), &bench_csv(&rows))
}

fn eval_row(
    out: &mut String,
    label: &str,
    params: &ModelParams,
    pairs: &[LoadedPair],
    opts: &EvalOptions,
    provider: &TextEmbeddingProvider,
) -> Result<(), CliError> {
    let summary = evaluate(params, pairs, opts, provider).map_err(runtime)?;
    let _ = writeln!(
        out,
        "{label},{:.6},{:.6},{:.6},{:.6}",
        summary.report.mean_rr,
        summary.report.hits_at_1,
        summary.report.hits_at_3,
        summary.report.hits_at_5
    );
    Ok(())
}

fn do_ablate(file_cfg: &FileConfig, args: &AblateArgs) -> Result<(), CliError> {
    if !matches!(args.axis.as_str(), "resolution" | "modality" | "cross-modal") {
        return Err(validation(format!(
            "unknown ablation axis {:?} (resolution, modality or cross-modal)",
            args.axis
        )));
    }
    let params = ModelParams::load(&args.checkpoint).map_err(runtime)?;
    let provider = TextEmbeddingProvider::toy_default();
    let manifest = load_manifest(&args.manifest).map_err(runtime)?;
    let pairs = load_pairs(&manifest, &args.manifest).map_err(runtime)?;
    let pairs = split_filter(pairs, &args.split)?;
    let mesh_samples = pick(args.mesh_samples, file_cfg.mesh_samples, 2048);
    let point_resolution = pick(args.point_resolution, file_cfg.point_resolution, 512);
    let base = EvalOptions {
        mesh_samples,
        point_resolution,
        ..EvalOptions::default()
    };

    let mut out = String::new();
    match args.axis.as_str() {
        "resolution" => {
            out.push_str("point_resolution,mean_rr,hits@1,hits@3,hits@5\n");
            for k in sgalign_core::training::ALLOWED_POINT_RESOLUTIONS {
                let opts = EvalOptions {
                    point_resolution: k,
                    ..base.clone()
                };
                eval_row(&mut out, &k.to_string(), &params, &pairs, &opts, &provider)?;
            }
        }
        "modality" => {
            out.push_str("modalities,mean_rr,hits@1,hits@3,hits@5\n");
            for mask in cumulative_subsets() {
                let opts = EvalOptions {
                    mask_src: mask,
                    mask_ref: mask,
                    ..base.clone()
                };
                eval_row(&mut out, &mask.to_string(), &params, &pairs, &opts, &provider)?;
            }
        }
        "cross-modal" => {
            // source -> reference modality combinations, evaluated at T = I4
            out.push_str("src,ref,mean_rr,hits@1,hits@3,hits@5\n");
            let combos = [
                ("P", "TR"),
                ("TR", "P"),
                ("PM", "TR"),
                ("PTR", "TR"),
                ("TR", "PMTR"),
                ("PT", "PMT"),
                ("PMSTR", "PSTR"),
                ("PSTR", "PMSTR"),
            ];
            for (src, dst) in combos {
                let opts = EvalOptions {
                    transform: TransformMode::Identity,
                    mask_src: parse_mask(src, "src")?,
                    mask_ref: parse_mask(dst, "ref")?,
                    ..base.clone()
                };
                eval_row(
                    &mut out,
                    &format!("{src},{dst}"),
                    &params,
                    &pairs,
                    &opts,
                    &provider,
                )?;
            }
        }
        _ => unreachable!("axis validated above"),
    }
    write_or_print(args.out.as_deref(), &out)
}
