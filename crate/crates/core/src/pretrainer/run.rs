use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{pretrain_step, PretrainConfig, PretrainError, TrainState, ENCODER_PREFIX};
use crate::datakit::{sample_pretrain_batch, AugmentationPolicy, SplitData};
use crate::encoder::{Checkpoint, Conv4, EncoderConfig};
use crate::episodic::evaluate;

pub const LOSS_HEADER: &str = "step,lr,l1,l2,total,clusters,noise_fraction";
const TIMING_HEADER: &str = "step,wall_ms";
const VAL_HEADER: &str = "step,accuracy,ci95,query_loss";

/// Random stream for step `step`; initialization uses the last stream.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: TrainState<Conv4<f32>>,
    pub final_checkpoint: PathBuf,
    /// Step of the checkpoint the run resumed from.
    pub resumed_from: Option<u64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PretrainError + '_ {
    move |source| PretrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_conv4_state(ckpt: &Checkpoint) -> Result<TrainState<Conv4<f32>>, PretrainError> {
    let encoder = Conv4::<f32>::from_checkpoint(ENCODER_PREFIX, ckpt)?;
    Ok(TrainState::restore(encoder, ckpt)?)
}

fn checkpoint_step(path: &Path) -> Result<u64, PretrainError> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.meta
        .get("step")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| PretrainError::Config(format!("{} has no step", path.display())))
}

/// The most advanced checkpoint under `dir` (`step_*.ckpt` or `final.ckpt`).
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>, PretrainError> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let step = if let Some(num) = name.strip_prefix("step_").and_then(|n| n.strip_suffix(".ckpt")) {
            match num.parse::<u64>() {
                Ok(s) => s,
                Err(_) => continue,
            }
        } else if name == "final.ckpt" {
            checkpoint_step(&path)?
        } else {
            continue;
        };
        if best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, path));
        }
    }
    Ok(best)
}

/// Opens a CSV log for appending after dropping rows past `keep_through`
/// and any incomplete trailing line.
fn open_log(path: &Path, header: &str, keep_through: u64) -> Result<BufWriter<File>, PretrainError> {
    let mut kept = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.split_inclusive('\n').skip(1) {
            if !line.ends_with('\n') {
                break;
            }
            match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                Some(step) if step <= keep_through => kept.push_str(line),
                _ => {}
            }
        }
    }
    fs::write(path, kept).map_err(io_err(path))?;
    let file = fs::OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    Ok(BufWriter::new(file))
}

fn save(state: &TrainState<Conv4<f32>>, cfg: &PretrainConfig, path: &Path) -> Result<(), PretrainError> {
    state.to_checkpoint(cfg).save(path)?;
    Ok(())
}

/// Pre-trains a fresh Conv4 (or resumes the latest checkpoint under
/// `out/checkpoints`) for `cfg.total_steps` steps.
///
/// Writes `loss.csv`, `timing.csv`, `val.csv` and checkpoints under `out`.
/// Everything except `timing.csv` is a deterministic function of the config.
pub fn pretrain(
    cfg: &PretrainConfig,
    encoder_cfg: &EncoderConfig,
    train: &SplitData,
    val: Option<&SplitData>,
    default_policy: &AugmentationPolicy,
    out: &Path,
) -> Result<PretrainOutcome, PretrainError> {
    cfg.validate()?;
    encoder_cfg.validate()?;
    if encoder_cfg.input != train.shape {
        return Err(PretrainError::Config(format!(
            "encoder expects {} images, train split holds {}",
            encoder_cfg.input, train.shape
        )));
    }
    let policy = cfg.augmentation.clone().unwrap_or_else(|| default_policy.clone());
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;

    let (mut state, resumed_from) = match latest_checkpoint(&ckpt_dir)? {
        Some((step, path)) => {
            let state = load_conv4_state(&Checkpoint::load(&path)?)?;
            if state.encoder.config() != encoder_cfg {
                return Err(PretrainError::Config(format!(
                    "{} holds a different encoder than the config asks for",
                    path.display()
                )));
            }
            log::info!("resuming from {} (step {step})", path.display());
            (state, Some(step))
        }
        None => {
            let mut rng = step_rng(cfg.seed, u64::MAX);
            (TrainState::new(Conv4::new(encoder_cfg.clone(), &mut rng)?), None)
        }
    };

    let loss_path = out.join("loss.csv");
    let timing_path = out.join("timing.csv");
    let val_path = out.join("val.csv");
    let mut loss_log = open_log(&loss_path, LOSS_HEADER, state.step)?;
    let mut timing_log = open_log(&timing_path, TIMING_HEADER, state.step)?;
    let mut val_log = open_log(&val_path, VAL_HEADER, state.step)?;
    let flush = |w: &mut BufWriter<File>, p: &Path| w.flush().map_err(io_err(p));

    while state.step < cfg.total_steps {
        let started = Instant::now();
        let mut rng = step_rng(cfg.seed, state.step);
        let batch = sample_pretrain_batch(&train.samples, cfg.originals, cfg.views_per_original, &policy, &mut rng)?;
        let report = match pretrain_step(&mut state, &batch, cfg) {
            Ok(r) => r,
            Err(PretrainError::NonFinite {
                step,
                stage,
                artifacts,
                ..
            }) => {
                let dump = out.join("dumps").join(format!("step_{step:08}.npz"));
                artifacts.write_npz(&dump)?;
                flush(&mut loss_log, &loss_path)?;
                return Err(PretrainError::NonFinite {
                    step,
                    stage,
                    artifacts,
                    dump: Some(dump),
                });
            }
            Err(e) => return Err(e),
        };
        let b = &report.loss;
        writeln!(
            loss_log,
            "{},{},{},{},{},{},{}",
            report.step,
            report.lr,
            b.l1,
            b.l2,
            b.total,
            report.assignment.num_clusters(),
            report.assignment.noise_fraction()
        )
        .map_err(io_err(&loss_path))?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        writeln!(timing_log, "{},{wall_ms:.3}", report.step).map_err(io_err(&timing_path))?;

        if let (Some(val), true) = (val, cfg.val_every > 0 && report.step % cfg.val_every == 0) {
            let r = evaluate(&state.encoder, val, &cfg.validation)?;
            writeln!(val_log, "{},{},{},{}", report.step, r.mean, r.ci95, r.query_loss).map_err(io_err(&val_path))?;
            log::info!("step {}: validation accuracy {:.4} +- {:.4}", report.step, r.mean, r.ci95);
        }
        if report.step % 100 == 0 || report.step == cfg.total_steps {
            log::info!(
                "step {}/{}: loss {:.4} (l1 {:.4}, l2 {:.4}), {} clusters, noise {:.2}",
                report.step,
                cfg.total_steps,
                b.total,
                b.l1,
                b.l2,
                report.assignment.num_clusters(),
                report.assignment.noise_fraction()
            );
        }
        if cfg.checkpoint_every > 0 && report.step % cfg.checkpoint_every == 0 {
            flush(&mut loss_log, &loss_path)?;
            flush(&mut timing_log, &timing_path)?;
            flush(&mut val_log, &val_path)?;
            save(&state, cfg, &ckpt_dir.join(format!("step_{:08}.ckpt", report.step)))?;
        }
    }
    flush(&mut loss_log, &loss_path)?;
    flush(&mut timing_log, &timing_path)?;
    flush(&mut val_log, &val_path)?;
    let final_checkpoint = ckpt_dir.join("final.ckpt");
    save(&state, cfg, &final_checkpoint)?;
    Ok(PretrainOutcome {
        state,
        final_checkpoint,
        resumed_from,
    })
}
