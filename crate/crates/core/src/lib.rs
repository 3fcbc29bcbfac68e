//! Class-cognizant contrastive pre-training for few-shot classification.
//!
//! The pipeline embeds a batch of unlabeled originals and their augmentations,
//! re-ranks pairwise distances with k-reciprocal encoding, clusters the batch
//! with HDBSCAN and optimizes a two-term loss: a pull of every view towards
//! its cluster mean and a pull towards its own source image. The trained
//! encoder is then evaluated on (N-way, K-shot) episodes with a
//! prototype-initialized linear head.

pub mod datakit;
pub mod tensor;
pub mod encoder;
pub mod rerank;
pub mod cluster;
pub mod loss;
pub mod optim;
pub mod episodic;
pub mod pretrainer;
