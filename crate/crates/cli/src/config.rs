//! Experiment configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use c3lr::cluster::ClusterConfig;
use c3lr::datakit::{AugmentationPolicy, DatasetProfile};
use c3lr::encoder::EncoderConfig;
use c3lr::episodic::{EvalConfig, FinetuneConfig};
use c3lr::optim::AdamConfig;
use c3lr::pretrainer::PretrainConfig;
use c3lr::rerank::RerankConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Parent of the experiment directory `out/<name>`.
    pub out: PathBuf,
    pub seed: u64,
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    pub pretrain: PretrainSection,
    pub augmentation: Option<AugmentationPolicy>,
    pub rerank: RerankConfig,
    pub cluster: Option<ClusterConfig>,
    pub eval: EvalSection,
    pub finetune: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "c3lr".into(),
            out: PathBuf::from("out"),
            seed: 0,
            dataset: DatasetSection::default(),
            encoder: EncoderSection::default(),
            pretrain: PretrainSection::default(),
            augmentation: None,
            rerank: RerankConfig::default(),
            cluster: None,
            eval: EvalSection::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// `omniglot` or `mini-imagenet`.
    pub profile: String,
    pub root: Option<PathBuf>,
    /// Check per-split class counts against the profile.
    pub check_split_sizes: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            profile: "omniglot".into(),
            root: None,
            check_split_sizes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub blocks: usize,
    pub channels: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderConfig::conv4(DatasetProfile::omniglot().shape);
        Self {
            blocks: c.blocks,
            channels: c.channels,
            bn_eps: c.bn_eps,
            bn_momentum: c.bn_momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub originals: usize,
    pub views_per_original: usize,
    pub total_steps: u64,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    pub checkpoint_every: u64,
    pub val_every: u64,
    pub val_episodes: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            originals: p.originals,
            views_per_original: p.views_per_original,
            total_steps: p.total_steps,
            lr: p.lr,
            lr_decay: p.lr_decay,
            decay_every: p.decay_every,
            beta1: p.adam.beta1,
            beta2: p.adam.beta2,
            eps: p.adam.eps,
            grad_clip: p.grad_clip,
            checkpoint_every: p.checkpoint_every,
            val_every: p.val_every,
            val_episodes: p.validation.episodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub runs: usize,
    pub chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            n_way: e.n_way,
            k_shot: e.k_shot,
            queries_per_class: e.queries_per_class,
            episodes: e.episodes,
            runs: e.runs,
            chunk: e.chunk,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }

    pub fn profile(&self) -> Result<DatasetProfile, CliError> {
        let mut p = DatasetProfile::by_name(&self.dataset.profile).ok_or_else(|| {
            CliError::Config(format!(
                "dataset.profile: unknown profile {:?} (expected omniglot or mini-imagenet)",
                self.dataset.profile
            ))
        })?;
        if !self.dataset.check_split_sizes {
            p.split_sizes = None;
        }
        Ok(p)
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig, CliError> {
        let c = EncoderConfig {
            blocks: self.encoder.blocks,
            channels: self.encoder.channels,
            bn_eps: self.encoder.bn_eps,
            bn_momentum: self.encoder.bn_momentum,
            ..EncoderConfig::conv4(self.profile()?.shape)
        };
        c.validate().map_err(|e| CliError::Config(format!("encoder: {e}")))?;
        Ok(c)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_way: self.eval.n_way,
            k_shot: self.eval.k_shot,
            queries_per_class: self.eval.queries_per_class,
            episodes: self.eval.episodes,
            runs: self.eval.runs,
            seed: self.seed,
            finetune: self.finetune,
            chunk: self.eval.chunk,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            originals: p.originals,
            views_per_original: p.views_per_original,
            total_steps: p.total_steps,
            lr: p.lr,
            lr_decay: p.lr_decay,
            decay_every: p.decay_every,
            adam: AdamConfig {
                beta1: p.beta1,
                beta2: p.beta2,
                eps: p.eps,
            },
            grad_clip: p.grad_clip,
            rerank: self.rerank,
            cluster: self.cluster,
            augmentation: self.augmentation.clone(),
            seed: self.seed,
            checkpoint_every: p.checkpoint_every,
            val_every: p.val_every,
            validation: EvalConfig {
                episodes: p.val_episodes,
                runs: 1,
                ..self.eval_config()
            },
        }
    }

    /// Field-level checks that are not expressible in the schema.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("name: {:?} is not a valid directory name", self.name));
        }
        self.profile()?;
        self.encoder_config()?;
        let e = &self.eval;
        for (field, v) in [
            ("n_way", e.n_way),
            ("k_shot", e.k_shot),
            ("queries_per_class", e.queries_per_class),
            ("episodes", e.episodes),
            ("runs", e.runs),
            ("chunk", e.chunk),
        ] {
            if v == 0 {
                return bad(format!("eval.{field}: must be positive"));
            }
        }
        if !(self.finetune.lr > 0.0) {
            return bad(format!("finetune.lr: must be positive (got {})", self.finetune.lr));
        }
        if self.pretrain.val_every > 0 && self.pretrain.val_episodes == 0 {
            return bad("pretrain.val_episodes: must be positive when val_every is set".into());
        }
        self.pretrain_config()
            .validate()
            .map_err(|e| CliError::Config(format!("pretrain: {e}")))?;
        Ok(())
    }
}
