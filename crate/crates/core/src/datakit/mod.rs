//! Dataset ingestion, class-disjoint splits, augmentation and the two
//! samplers: pre-training batches (originals plus augmented views) and
//! (N-way, K-shot) episodes.

mod augment;
mod image;
mod load;
mod sampling;
pub mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use augment::{AugmentationPolicy, CropBox, Transform};
pub use image::{Image, ImageSample, ImageShape};
pub use load::{check_disjoint, load_split, read_manifest, write_manifest, SplitData};
pub use sampling::{sample_episode, sample_pretrain_batch, Episode, EpisodeItem, PretrainBatch};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("split directory {0} is missing")]
    MissingSplit(PathBuf),
    #[error("class directory {0} is missing")]
    MissingClass(PathBuf),
    #[error("class directory {0} contains no images")]
    EmptyClass(PathBuf),
    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("split {split} of {profile} should hold {expected} classes, found {found} under {path}")]
    ClassCount {
        profile: String,
        split: Split,
        expected: usize,
        found: usize,
        path: PathBuf,
    },
    #[error("class {0} appears in more than one split")]
    Overlap(String),
    #[error("requested {requested} originals but the pool only holds {available} samples")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("at least one augmented view per original is required")]
    NoViews,
    #[error("episode needs {needed} classes, split has {available}")]
    TooFewClasses { needed: usize, available: usize },
    #[error("episode needs {needed} samples per class, only {available} classes qualify out of {requested} required")]
    TooFewSamples {
        needed: usize,
        available: usize,
        requested: usize,
    },
    #[error("invalid sampling request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

/// Number of classes per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub shape: ImageShape,
    /// When set, loading a split checks its class count.
    pub split_sizes: Option<SplitSizes>,
}

impl DatasetProfile {
    pub fn omniglot() -> Self {
        Self {
            name: "omniglot".into(),
            shape: ImageShape::new(1, 28, 28),
            split_sizes: Some(SplitSizes {
                train: 1028,
                val: 172,
                test: 423,
            }),
        }
    }

    pub fn mini_imagenet() -> Self {
        Self {
            name: "mini-imagenet".into(),
            shape: ImageShape::new(3, 84, 84),
            split_sizes: Some(SplitSizes {
                train: 64,
                val: 16,
                test: 20,
            }),
        }
    }

    /// Profile without class count checks.
    pub fn custom(name: impl Into<String>, shape: ImageShape) -> Self {
        Self {
            name: name.into(),
            shape,
            split_sizes: None,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "omniglot" => Some(Self::omniglot()),
            "mini-imagenet" | "miniimagenet" => Some(Self::mini_imagenet()),
            _ => None,
        }
    }

    pub fn default_policy(&self) -> AugmentationPolicy {
        if self.shape.channels == 1 {
            AugmentationPolicy::omniglot()
        } else {
            AugmentationPolicy::default()
        }
    }
}
