use std::fs;
use std::path::{Path, PathBuf};

use c3lr::cluster::hdbscan_with_tree;
use c3lr::datakit::synthetic::{write_glyph_dataset, GlyphConfig};
use c3lr::datakit::{load_split, sample_pretrain_batch, DataError, Split, SplitData, SplitSizes};
use c3lr::encoder::{Checkpoint, Conv4, Encoder, EncoderError, Mode};
use c3lr::episodic::{evaluate as run_eval, EpisodicError};
use c3lr::loss::{c3lr_loss, BatchLayout};
use c3lr::pretrainer::{cluster_batch, pretrain as run_pretrain, step_rng, PretrainError, ENCODER_PREFIX};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::{CliError, Common, TaskFlags, DATASET_ROOT_ENV};

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn data_error(e: DataError) -> CliError {
    match e {
        DataError::MissingRoot(p) => CliError::Config(format!("dataset root not found: {}", p.display())),
        e @ (DataError::MissingSplit(_) | DataError::ClassCount { .. } | DataError::MissingClass(_)) => {
            CliError::Config(e.to_string())
        }
        e => runtime(e),
    }
}

fn encoder_error(e: EncoderError) -> CliError {
    match e {
        e @ EncoderError::Config(_) => CliError::Config(e.to_string()),
        e => runtime(e),
    }
}

fn episodic_error(e: EpisodicError) -> CliError {
    match e {
        EpisodicError::Data(d) => data_error(d),
        EpisodicError::Encoder(e) => encoder_error(e),
        e => runtime(e),
    }
}

fn pretrain_error(e: PretrainError) -> CliError {
    match e {
        PretrainError::Config(m) => CliError::Config(m),
        PretrainError::Data(d) => data_error(d),
        PretrainError::Encoder(e) => encoder_error(e),
        e => runtime(e),
    }
}

/// Loads the config and applies flag and environment overrides.
fn resolve(common: &Common, task: Option<&TaskFlags>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(root) = std::env::var_os(DATASET_ROOT_ENV).filter(|v| !v.is_empty()) {
        cfg.dataset.root = Some(PathBuf::from(root));
    }
    if let Some(root) = &common.dataset_root {
        cfg.dataset.root = Some(root.clone());
    }
    if let Some(t) = task {
        let e = &mut cfg.eval;
        e.n_way = t.n.unwrap_or(e.n_way);
        e.k_shot = t.k.unwrap_or(e.k_shot);
        e.episodes = t.episodes.unwrap_or(e.episodes);
        e.runs = t.runs.unwrap_or(e.runs);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_root(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let root = cfg.dataset.root.clone().ok_or_else(|| {
        CliError::Config(format!(
            "no dataset root: set dataset.root, --dataset-root or {DATASET_ROOT_ENV}"
        ))
    })?;
    if !root.is_dir() {
        return Err(CliError::Config(format!("dataset root not found: {}", root.display())));
    }
    Ok(root)
}

fn load(cfg: &ExperimentConfig, split: Split) -> Result<SplitData, CliError> {
    let root = dataset_root(cfg)?;
    log::info!("loading {split} split from {}", root.display());
    load_split(&cfg.profile()?, split, &root).map_err(data_error)
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(|_| CliError::Config(format!("--split: unknown split {s:?}")))
}

fn write_echo(cfg: &ExperimentConfig, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, cfg.to_toml()).map_err(io(path))
}

/// Loads a checkpoint encoder, or initializes the one pre-training would
/// start from. Returns a short tag naming the source.
fn encoder(
    cfg: &ExperimentConfig,
    checkpoint: Option<PathBuf>,
    untrained: bool,
) -> Result<(Conv4<f32>, String, Option<PathBuf>), CliError> {
    let shape = cfg.profile()?.shape;
    if untrained {
        let mut rng = step_rng(cfg.seed, u64::MAX);
        let enc = Conv4::new(cfg.encoder_config()?, &mut rng).map_err(encoder_error)?;
        return Ok((enc, "untrained".into(), None));
    }
    let path = checkpoint.unwrap_or_else(|| cfg.experiment_dir().join("checkpoints").join("final.ckpt"));
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint not found: {}", path.display())));
    }
    let ckpt = Checkpoint::load(&path).map_err(runtime)?;
    let enc = Conv4::<f32>::from_checkpoint(ENCODER_PREFIX, &ckpt)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if enc.input_shape() != shape {
        return Err(CliError::Config(format!(
            "checkpoint {} expects {} images but dataset profile {} has {}",
            path.display(),
            enc.input_shape(),
            cfg.dataset.profile,
            shape
        )));
    }
    let tag = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok((enc, tag, Some(path)))
}

pub fn pretrain(common: &Common, task: &TaskFlags, steps: Option<u64>) -> Result<(), CliError> {
    let mut cfg = resolve(common, Some(task))?;
    if let Some(s) = steps {
        cfg.pretrain.total_steps = s;
    }
    let dir = cfg.experiment_dir();
    let train = load(&cfg, Split::Train)?;
    let val = if cfg.pretrain.val_every > 0 {
        match load(&cfg, Split::Val) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("validation disabled: {e}");
                None
            }
        }
    } else {
        None
    };
    write_echo(&cfg, &dir.join("config.echo"))?;
    let profile = cfg.profile()?;
    let outcome = run_pretrain(
        &cfg.pretrain_config(),
        &cfg.encoder_config()?,
        &train,
        val.as_ref(),
        &profile.default_policy(),
        &dir,
    )
    .map_err(pretrain_error)?;
    println!(
        "pre-trained {} steps; final checkpoint {}",
        outcome.state.step,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

pub fn evaluate(
    common: &Common,
    task: &TaskFlags,
    checkpoint: Option<PathBuf>,
    untrained: bool,
    split: &str,
) -> Result<(), CliError> {
    let cfg = resolve(common, Some(task))?;
    let split = parse_split(split)?;
    let (enc, tag, path) = encoder(&cfg, checkpoint, untrained)?;
    let data = load(&cfg, split)?;
    let eval_cfg = cfg.eval_config();
    let report = run_eval(&enc, &data, &eval_cfg).map_err(episodic_error)?;
    let label = format!("{split}_{}way_{}shot_{tag}", eval_cfg.n_way, eval_cfg.k_shot);
    let eval_dir = cfg.experiment_dir().join("eval");
    write_echo(&cfg, &eval_dir.join(format!("{label}.config.echo")))?;
    let record = json!({
        "checkpoint": path.map(|p| p.display().to_string()),
        "split": split,
        "report": report,
    });
    let out = eval_dir.join(format!("{label}.json"));
    fs::write(&out, serde_json::to_string_pretty(&record).map_err(runtime)?).map_err(io(&out))?;
    print!("{}", report.table());
    println!("report written to {}", out.display());
    Ok(())
}

pub struct InspectArgs {
    pub checkpoint: Option<PathBuf>,
    pub untrained: bool,
    pub split: String,
    pub originals: Option<usize>,
    pub views: Option<usize>,
    pub step: u64,
}

pub fn inspect(common: &Common, args: &InspectArgs) -> Result<(), CliError> {
    let mut cfg = resolve(common, None)?;
    if let Some(l) = args.originals {
        cfg.pretrain.originals = l;
    }
    if let Some(q) = args.views {
        cfg.pretrain.views_per_original = q;
    }
    cfg.validate()?;
    let split = parse_split(&args.split)?;
    let (enc, tag, path) = encoder(&cfg, args.checkpoint.clone(), args.untrained)?;
    let data = load(&cfg, split)?;
    let pcfg = cfg.pretrain_config();
    let policy = pcfg
        .augmentation
        .clone()
        .unwrap_or_else(|| cfg.profile().expect("validated").default_policy());
    let mut rng = step_rng(cfg.seed, args.step);
    let batch = sample_pretrain_batch(&data.samples, pcfg.originals, pcfg.views_per_original, &policy, &mut rng)
        .map_err(data_error)?;
    let (assignment, artifacts) = cluster_batch(&enc, &batch, &pcfg, args.step).map_err(pretrain_error)?;
    let r = artifacts.reranked.as_ref().expect("cluster_batch fills R");
    let (_, tree) = hdbscan_with_tree(r, &pcfg.cluster_config()).map_err(runtime)?;
    let (e_train, _) = enc.forward(&batch.images(), Mode::Train).map_err(runtime)?;
    let loss = c3lr_loss(&e_train, BatchLayout::from(&batch), &assignment).map_err(runtime)?;

    let label = format!("{tag}_{split}_seed{}_step{}", cfg.seed, args.step);
    let dir = cfg.experiment_dir().join("inspect").join(&label);
    write_echo(&cfg, &dir.join("config.echo"))?;
    artifacts.write_npz(&dir.join("batch.npz")).map_err(runtime)?;
    let selected: Vec<_> = tree
        .as_ref()
        .map(|t| {
            t.selected
                .iter()
                .map(|id| {
                    let s = t.stability.iter().find(|(c, _)| c == id).map(|(_, s)| *s);
                    json!({ "node": id, "stability": s })
                })
                .collect()
        })
        .unwrap_or_default();
    let summary = json!({
        "checkpoint": path.map(|p| p.display().to_string()),
        "split": split,
        "step": args.step,
        "seed": cfg.seed,
        "batch_size": batch.len(),
        "originals": batch.num_originals(),
        "views_per_original": batch.views_per_original,
        "source_ids": batch.source_ids,
        "num_clusters": assignment.num_clusters(),
        "noise_fraction": assignment.noise_fraction(),
        "sizes": assignment.sizes(),
        "labels": assignment.codes(),
        "condensed_tree": tree.as_ref().map(|t| json!({
            "num_points": t.num_points,
            "num_edges": t.edges.len(),
            "num_cluster_nodes": t.stability.len(),
            "selected": selected,
        })),
        "rerank": pcfg.rerank.clipped(batch.len()),
        "cluster": pcfg.cluster_config(),
        "loss": loss,
    });
    let out = dir.join("summary.json");
    fs::write(&out, serde_json::to_string_pretty(&summary).map_err(runtime)?).map_err(io(&out))?;
    println!(
        "B = {}: {} clusters, noise fraction {:.3}, loss {:.4} (l1 {:.4}, l2 {:.4})",
        batch.len(),
        assignment.num_clusters(),
        assignment.noise_fraction(),
        loss.total,
        loss.l1,
        loss.l2
    );
    println!("dump written to {}", dir.display());
    Ok(())
}

pub fn make_synthetic(
    out: &Path,
    seed: Option<u64>,
    classes: Option<Vec<usize>>,
    drawings: Option<usize>,
) -> Result<(), CliError> {
    let mut g = GlyphConfig::default();
    if let Some(s) = seed {
        g.seed = s;
    }
    if let Some(c) = classes {
        if c.len() != 3 {
            return Err(CliError::Config(format!("--classes: expected train,val,test counts, got {c:?}")));
        }
        g.split_sizes = SplitSizes {
            train: c[0],
            val: c[1],
            test: c[2],
        };
    }
    if let Some(d) = drawings {
        g.drawings_per_class = d;
    }
    write_glyph_dataset(out, &g).map_err(data_error)?;
    println!("glyph dataset written to {}", out.display());
    Ok(())
}
