//! Embedding networks `images -> R^E`.
//!
//! The pipeline only talks to the [`Encoder`] trait; [`Conv4`] is the shipped
//! implementation.

mod checkpoint;
mod conv4;

use std::path::PathBuf;

use ndarray::Array2;

use crate::datakit::{Image, ImageShape};
use crate::tensor::Scalar;

pub use checkpoint::{Checkpoint, NamedTensor, TensorData, FORMAT_VERSION};
pub use conv4::{Conv4, Conv4Tape, EncoderConfig};

/// `B x E` embeddings, one row per input image in input order.
pub type EmbeddingMatrix = Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("image {index} has shape {found}, encoder expects {expected}")]
    ShapeMismatch {
        index: usize,
        expected: ImageShape,
        found: ImageShape,
    },
    #[error("empty image batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Batch normalization behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, differentiable through them.
    Train,
    /// Running statistics, every row independent of the others.
    Eval,
}

pub trait Encoder: Send + Sync {
    type Scalar: Scalar;
    type Tape;

    fn kind(&self) -> &'static str;
    fn input_shape(&self) -> ImageShape;
    fn embed_dim(&self) -> usize;

    /// Trainable parameters in a stable flat order.
    fn params(&self) -> &[Self::Scalar];
    fn params_mut(&mut self) -> &mut [Self::Scalar];

    /// Pure forward pass; buffers such as running statistics are updated
    /// only by [`Encoder::commit`].
    fn forward(&self, images: &[&Image], mode: Mode) -> Result<(EmbeddingMatrix, Self::Tape), EncoderError>;

    /// Gradient of `sum(grad * output)` with respect to [`Encoder::params`].
    fn backward(&self, tape: &Self::Tape, grad: &EmbeddingMatrix) -> Vec<Self::Scalar>;

    /// Applies the buffer updates recorded by a training forward pass.
    fn commit(&mut self, tape: &Self::Tape);

    fn save_tensors(&self, prefix: &str, ckpt: &mut Checkpoint);
    fn load_tensors(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<(), EncoderError>;

    fn embed(&self, images: &[&Image]) -> Result<EmbeddingMatrix, EncoderError> {
        Ok(self.forward(images, Mode::Eval)?.0)
    }

    /// Evaluation-mode embedding of an arbitrarily long list, `chunk` images
    /// at a time.
    fn embed_chunked(&self, images: &[&Image], chunk: usize) -> Result<EmbeddingMatrix, EncoderError> {
        if images.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let mut out = Array2::zeros((images.len(), self.embed_dim()));
        for (i, part) in images.chunks(chunk.max(1)).enumerate() {
            let e = self.embed(part)?;
            let start = i * chunk.max(1);
            out.slice_mut(ndarray::s![start..start + part.len(), ..]).assign(&e);
        }
        Ok(out)
    }
}

pub(crate) fn check_shapes(images: &[&Image], expected: ImageShape) -> Result<(), EncoderError> {
    if images.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    for (index, img) in images.iter().enumerate() {
        if img.shape() != expected {
            return Err(EncoderError::ShapeMismatch {
                index,
                expected,
                found: img.shape(),
            });
        }
    }
    Ok(())
}
