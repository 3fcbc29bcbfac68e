//! The outer pre-training loop: sample a batch, embed it, re-rank, cluster,
//! evaluate the two-term loss and take an Adam step.

mod run;

use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cluster::{hdbscan, ClusterAssignment, ClusterConfig, ClusterError};
use crate::datakit::{AugmentationPolicy, DataError, PretrainBatch};
use crate::encoder::{Checkpoint, EmbeddingMatrix, Encoder, EncoderError, Mode, TensorData};
use crate::episodic::{EpisodicError, EvalConfig};
use crate::loss::{c3lr_loss_with_grad, BatchLayout, LossBreakdown, LossError};
use crate::optim::{AdamConfig, AdamState};
use crate::rerank::{rerank_parts, RerankConfig, RerankError};
use crate::tensor::Scalar;

pub use run::{latest_checkpoint, load_conv4_state, pretrain, step_rng, PretrainOutcome, LOSS_HEADER};

/// Prefix of encoder tensors inside a training checkpoint.
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Originals per batch (`L`).
    pub originals: usize,
    /// Augmented views per original (`Q`).
    pub views_per_original: usize,
    pub total_steps: u64,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    pub rerank: RerankConfig,
    /// Defaults to [`ClusterConfig::for_views`] of `views_per_original`.
    pub cluster: Option<ClusterConfig>,
    /// Defaults to the dataset profile's policy.
    pub augmentation: Option<AugmentationPolicy>,
    pub seed: u64,
    /// Save `checkpoints/step_*.ckpt` every this many steps (0: final only).
    pub checkpoint_every: u64,
    /// Validation episodes every this many steps (0: never).
    pub val_every: u64,
    pub validation: EvalConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            originals: 50,
            views_per_original: 3,
            total_steps: 5000,
            lr: 1e-3,
            lr_decay: 0.5,
            decay_every: 25_000,
            adam: AdamConfig::default(),
            grad_clip: None,
            rerank: RerankConfig::default(),
            cluster: None,
            augmentation: None,
            seed: 0,
            checkpoint_every: 1000,
            val_every: 2500,
            validation: EvalConfig {
                episodes: 15,
                runs: 1,
                ..EvalConfig::default()
            },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: String| Err(PretrainError::Config(m));
        if self.originals == 0 || self.views_per_original == 0 {
            return bad(format!(
                "originals and views_per_original must be positive (got {}, {})",
                self.originals, self.views_per_original
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive (got {})", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1] (got {})", self.lr_decay));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad(format!("invalid Adam hyperparameters {a:?}"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive (got {c})"));
            }
        }
        self.rerank
            .validate(usize::MAX)
            .map_err(|e| PretrainError::Config(format!("rerank: {e}")))?;
        self.cluster_config().validate().map_err(|e| PretrainError::Config(e.to_string()))?;
        if let Some(p) = &self.augmentation {
            p.validate().map_err(PretrainError::Config)?;
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.originals * (self.views_per_original + 1)
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        self.cluster.unwrap_or_else(|| ClusterConfig::for_views(self.views_per_original))
    }
}

/// `lr * lr_decay ^ floor(step / decay_every)`.
pub fn lr_at(step: u64, cfg: &PretrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay.powi((step / cfg.decay_every) as i32)
}

/// Intermediate results of a step, kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepArtifacts {
    pub step: u64,
    /// Evaluation-mode embeddings used for clustering.
    pub embeddings: EmbeddingMatrix,
    pub base: Option<Array2<f64>>,
    pub jaccard: Option<Array2<f64>>,
    pub reranked: Option<Array2<f64>>,
    pub labels: Option<Vec<i64>>,
}

impl StepArtifacts {
    pub fn write_npz(&self, path: &std::path::Path) -> Result<(), PretrainError> {
        let io = |e: std::io::Error| PretrainError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let npz = |e: ndarray_npy::WriteNpzError| PretrainError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let mut w = ndarray_npy::NpzWriter::new(std::fs::File::create(path).map_err(io)?);
        w.add_array("embeddings", &self.embeddings).map_err(npz)?;
        for (name, m) in [("D", &self.base), ("d_J", &self.jaccard), ("R", &self.reranked)] {
            if let Some(m) = m {
                w.add_array(name, m).map_err(npz)?;
            }
        }
        if let Some(l) = &self.labels {
            w.add_array("labels", &ndarray::Array1::from(l.clone())).map_err(npz)?;
        }
        w.finish().map_err(npz)?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("invalid pre-training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Episodic(#[from] EpisodicError),
    #[error("non-finite {stage} at step {step}{}", dump.as_ref().map(|p| format!("; batch artifacts in {}", p.display())).unwrap_or_default())]
    NonFinite {
        step: u64,
        stage: &'static str,
        artifacts: Box<StepArtifacts>,
        dump: Option<PathBuf>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Encoder plus optimizer state. `step` counts completed updates.
#[derive(Debug, Clone)]
pub struct TrainState<E: Encoder> {
    pub step: u64,
    pub encoder: E,
    pub adam: AdamState,
}

impl<E: Encoder> TrainState<E> {
    pub fn new(encoder: E) -> Self {
        let n = encoder.params().len();
        Self {
            step: 0,
            encoder,
            adam: AdamState::new(n),
        }
    }

    pub fn to_checkpoint(&self, cfg: &PretrainConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::new(serde_json::json!({
            "step": self.step,
            "adam_t": self.adam.t,
            "seed": cfg.seed,
            "pretrain": cfg,
        }));
        self.encoder.save_tensors(ENCODER_PREFIX, &mut ckpt);
        let n = self.adam.m.len();
        ckpt.push("adam.m", vec![n], TensorData::from_scalars(&self.adam.m));
        ckpt.push("adam.v", vec![n], TensorData::from_scalars(&self.adam.v));
        ckpt
    }

    /// Loads encoder and optimizer state into `encoder`'s architecture.
    pub fn restore(mut encoder: E, ckpt: &Checkpoint) -> Result<Self, EncoderError> {
        encoder.load_tensors(ENCODER_PREFIX, ckpt)?;
        let field = |k: &str| {
            ckpt.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| EncoderError::Checkpoint(format!("meta entry {k} missing")))
        };
        let step = field("step")?;
        let t = field("adam_t")?;
        let moment = |name: &str| -> Result<Vec<f64>, EncoderError> {
            let v = ckpt
                .tensor(name)?
                .data
                .as_scalars::<f64>()
                .ok_or_else(|| EncoderError::Checkpoint(format!("tensor {name} is not f64")))?;
            if v.len() != encoder.params().len() {
                return Err(EncoderError::Checkpoint(format!(
                    "tensor {name} has {} entries, encoder has {} parameters",
                    v.len(),
                    encoder.params().len()
                )));
            }
            Ok(v)
        };
        let adam = AdamState {
            m: moment("adam.m")?,
            v: moment("adam.v")?,
            t,
        };
        Ok(Self { step, encoder, adam })
    }
}

/// What one update did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Step number after the update (1-based).
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub assignment: ClusterAssignment,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Clusters the evaluation-mode embeddings of `batch` and returns the
/// artifacts along the way.
pub fn cluster_batch<E: Encoder>(
    encoder: &E,
    batch: &PretrainBatch,
    cfg: &PretrainConfig,
    step: u64,
) -> Result<(ClusterAssignment, StepArtifacts), PretrainError> {
    let images = batch.images();
    let embeddings = encoder.embed(&images)?;
    let mut art = StepArtifacts {
        step,
        embeddings,
        base: None,
        jaccard: None,
        reranked: None,
        labels: None,
    };
    if art.embeddings.iter().any(|v| !v.is_finite()) {
        return Err(non_finite(step, "embedding", art));
    }
    let parts = rerank_parts(&art.embeddings, &cfg.rerank.clipped(images.len()))?;
    let assignment = hdbscan(&parts.combined, &cfg.cluster_config())?;
    art.base = Some(parts.base);
    art.jaccard = Some(parts.jaccard);
    art.reranked = Some(parts.combined);
    art.labels = Some(assignment.codes());
    Ok((assignment, art))
}

fn non_finite(step: u64, stage: &'static str, artifacts: StepArtifacts) -> PretrainError {
    PretrainError::NonFinite {
        step,
        stage,
        artifacts: Box::new(artifacts),
        dump: None,
    }
}

/// One pass of the loop. Clustering sees evaluation-mode embeddings; the loss
/// and gradient use a training-mode pass whose batch statistics are then
/// committed. The Adam step uses `lr_at(state.step)`.
pub fn pretrain_step<E: Encoder>(
    state: &mut TrainState<E>,
    batch: &PretrainBatch,
    cfg: &PretrainConfig,
) -> Result<StepReport, PretrainError> {
    let step = state.step;
    let (assignment, art) = cluster_batch(&state.encoder, batch, cfg, step)?;
    let (e, tape) = state.encoder.forward(&batch.images(), Mode::Train)?;
    let (loss, grad_e) = match c3lr_loss_with_grad(&e, BatchLayout::from(batch), &assignment) {
        Ok(v) => v,
        Err(LossError::NonFinite(_)) => return Err(non_finite(step, "loss", art)),
        Err(err) => return Err(err.into()),
    };
    let mut grad = state.encoder.backward(&tape, &grad_e);
    let grad_norm = grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(non_finite(step, "gradient", art));
    }
    if let Some(clip) = cfg.grad_clip {
        if grad_norm > clip {
            let s = clip / grad_norm;
            for g in &mut grad {
                *g = E::Scalar::from_f64_lossy(g.as_f64() * s);
            }
        }
    }
    state.encoder.commit(&tape);
    let lr = lr_at(step, cfg);
    state.adam.step(&cfg.adam, lr, state.encoder.params_mut(), &grad);
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        lr,
        loss,
        assignment,
        grad_norm,
    })
}
