//! Four-block convolutional encoder: `[conv3x3 -> batch-norm -> ReLU ->
//! maxpool2x2] x blocks`, then flatten.
//!
//! Activations are kept channel-major (`C x N x H x W`) so that each
//! convolution is one matrix product over the whole batch and batch-norm
//! statistics are contiguous per channel.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_shapes, Checkpoint, EmbeddingMatrix, Encoder, EncoderError, Mode, TensorData};
use crate::datakit::{Image, ImageShape};
use crate::tensor::{gemm, Op, Scalar};

const KSIZE: usize = 3;
const TAPS: usize = KSIZE * KSIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input: ImageShape,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

fn default_blocks() -> usize {
    4
}
fn default_channels() -> usize {
    64
}
fn default_eps() -> f64 {
    1e-5
}
fn default_momentum() -> f64 {
    0.1
}

impl EncoderConfig {
    /// Standard Conv4: four blocks of 64 channels.
    pub fn conv4(input: ImageShape) -> Self {
        Self {
            input,
            blocks: default_blocks(),
            channels: default_channels(),
            bn_eps: default_eps(),
            bn_momentum: default_momentum(),
        }
    }

    /// Spatial extent after all pooling stages (floor at every stage).
    pub fn output_hw(&self) -> (usize, usize) {
        (self.input.height >> self.blocks, self.input.width >> self.blocks)
    }

    /// `E = channels * floor(H / 2^blocks) * floor(W / 2^blocks)`.
    pub fn embed_dim(&self) -> usize {
        let (h, w) = self.output_hw();
        self.channels * h * w
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.blocks == 0 || self.channels == 0 || self.input.channels == 0 {
            return Err(EncoderError::Config("blocks and channel counts must be positive".into()));
        }
        let min_side = 1usize << self.blocks;
        if self.input.height < min_side || self.input.width < min_side {
            return Err(EncoderError::Config(format!(
                "input {}x{} collapses to zero extent under {} pooling stages (needs at least {min_side}x{min_side})",
                self.input.height, self.input.width, self.blocks
            )));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(EncoderError::Config("bn_eps must be > 0 and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    weight: usize,
    gamma: usize,
    beta: usize,
}

impl BlockGeom {
    fn oh(&self) -> usize {
        self.h / 2
    }
    fn ow(&self) -> usize {
        self.w / 2
    }
    fn k(&self) -> usize {
        self.cin * TAPS
    }
}

#[derive(Debug, Clone)]
pub struct Conv4<T> {
    config: EncoderConfig,
    geom: Vec<BlockGeom>,
    params: Vec<T>,
    running_mean: Vec<Vec<T>>,
    running_var: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
struct BlockTape<T> {
    cols: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    argmax: Vec<u8>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Conv4Tape<T> {
    mode: Mode,
    n: usize,
    blocks: Vec<BlockTape<T>>,
}

impl<T: Scalar> Conv4<T> {
    /// Conv weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); batch-norm scale 1,
    /// shift 0; running statistics (0, 1).
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self, EncoderError> {
        let mut enc = Self::zeroed(config)?;
        for g in &enc.geom {
            let bound = 1.0 / (g.k() as f64).sqrt();
            for p in &mut enc.params[g.weight..g.weight + g.cout * g.k()] {
                *p = T::from_f64_lossy(rng.random_range(-bound..bound));
            }
            for p in &mut enc.params[g.gamma..g.gamma + g.cout] {
                *p = T::one();
            }
        }
        Ok(enc)
    }

    fn zeroed(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut geom = Vec::with_capacity(config.blocks);
        let (mut h, mut w, mut cin) = (config.input.height, config.input.width, config.input.channels);
        let mut offset = 0;
        for _ in 0..config.blocks {
            let cout = config.channels;
            let weight = offset;
            let gamma = weight + cout * cin * TAPS;
            let beta = gamma + cout;
            offset = beta + cout;
            geom.push(BlockGeom {
                cin,
                cout,
                h,
                w,
                weight,
                gamma,
                beta,
            });
            cin = cout;
            h /= 2;
            w /= 2;
        }
        let running_mean = geom.iter().map(|g| vec![T::zero(); g.cout]).collect();
        let running_var = geom.iter().map(|g| vec![T::one(); g.cout]).collect();
        Ok(Self {
            config,
            geom,
            params: vec![T::zero(); offset],
            running_mean,
            running_var,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Running batch-norm statistics per block: `(mean, var)`.
    pub fn running_stats(&self) -> impl Iterator<Item = (&[T], &[T])> {
        self.running_mean
            .iter()
            .zip(&self.running_var)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Rebuilds an encoder whose config and tensors are stored in `ckpt`.
    pub fn from_checkpoint(prefix: &str, ckpt: &Checkpoint) -> Result<Self, EncoderError> {
        let entry = ckpt
            .meta
            .get(format!("{prefix}encoder"))
            .ok_or_else(|| EncoderError::Checkpoint(format!("meta entry {prefix}encoder missing")))?;
        let config: EncoderConfig = serde_json::from_value(entry["config"].clone())
            .map_err(|e| EncoderError::Checkpoint(format!("bad encoder config: {e}")))?;
        let mut enc = Self::zeroed(config)?;
        enc.load_tensors(prefix, ckpt)?;
        Ok(enc)
    }

    fn run(&self, images: &[&Image], mode: Mode, keep: bool) -> Result<(EmbeddingMatrix, Conv4Tape<T>), EncoderError> {
        check_shapes(images, self.config.input)?;
        let n = images.len();
        let shape = self.config.input;
        let plane = shape.height * shape.width;
        let mut x = vec![T::zero(); shape.channels * n * plane];
        for (i, img) in images.iter().enumerate() {
            for c in 0..shape.channels {
                let dst = &mut x[(c * n + i) * plane..(c * n + i + 1) * plane];
                for (d, s) in dst.iter_mut().zip(img.channel(c)) {
                    *d = T::from_f32(*s).expect("finite pixel");
                }
            }
        }

        let eps = T::from_f64_lossy(self.config.bn_eps);
        let mut tapes = Vec::with_capacity(self.geom.len());
        for (b, g) in self.geom.iter().enumerate() {
            let m = n * g.h * g.w;
            let cols = im2col(&x, g.cin, n, g.h, g.w);
            let mut y = vec![T::zero(); g.cout * m];
            gemm(
                g.cout,
                g.k(),
                m,
                &self.params[g.weight..g.weight + g.cout * g.k()],
                Op::N,
                &cols,
                Op::N,
                T::zero(),
                &mut y,
            );

            let (mean, var) = match mode {
                Mode::Train => channel_moments(&y, g.cout, m),
                Mode::Eval => (self.running_mean[b].clone(), self.running_var[b].clone()),
            };
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let gamma = &self.params[g.gamma..g.gamma + g.cout];
            let beta = &self.params[g.beta..g.beta + g.cout];

            let mut act = vec![T::zero(); g.cout * m];
            for c in 0..g.cout {
                let ys = &mut y[c * m..(c + 1) * m];
                let acts = &mut act[c * m..(c + 1) * m];
                for (yv, a) in ys.iter_mut().zip(acts.iter_mut()) {
                    *yv = (*yv - mean[c]) * inv_std[c];
                    let v = gamma[c] * *yv + beta[c];
                    *a = if v > T::zero() { v } else { T::zero() };
                }
            }
            let (pooled, argmax) = max_pool(&act, g.cout, n, g.h, g.w);
            x = pooled;
            if keep {
                tapes.push(BlockTape {
                    cols,
                    xhat: y,
                    inv_std,
                    argmax,
                    batch_mean: mean,
                    batch_var: var,
                });
            }
        }

        let last = self.geom.last().expect("at least one block");
        let (oh, ow) = (last.oh(), last.ow());
        let per = oh * ow;
        let e = last.cout * per;
        let mut out = Array2::zeros((n, e));
        for i in 0..n {
            let mut row = out.row_mut(i);
            for c in 0..last.cout {
                for p in 0..per {
                    row[c * per + p] = x[(c * n + i) * per + p].as_f64();
                }
            }
        }
        Ok((
            out,
            Conv4Tape {
                mode,
                n,
                blocks: tapes,
            },
        ))
    }
}

fn channel_moments<T: Scalar>(y: &[T], channels: usize, m: usize) -> (Vec<T>, Vec<T>) {
    let mut mean = Vec::with_capacity(channels);
    let mut var = Vec::with_capacity(channels);
    for c in 0..channels {
        let s = &y[c * m..(c + 1) * m];
        let mu = s.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
        let sq = s
            .iter()
            .map(|v| {
                let d = v.as_f64() - mu;
                d * d
            })
            .sum::<f64>()
            / m as f64;
        mean.push(T::from_f64_lossy(mu));
        var.push(T::from_f64_lossy(sq));
    }
    (mean, var)
}

/// `(cin * 9) x (n * h * w)` patch matrix for a 3x3 convolution with zero
/// padding 1.
fn im2col<T: Scalar>(x: &[T], cin: usize, n: usize, h: usize, w: usize) -> Vec<T> {
    let m = n * h * w;
    let mut cols = vec![T::zero(); cin * TAPS * m];
    for c in 0..cin {
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (c * TAPS + ky * KSIZE + kx) * m;
                for i in 0..n {
                    for yy in 0..h {
                        let sy = yy as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &x[((c * n + i) * h + sy as usize) * w..][..w];
                        let dst = &mut cols[row + (i * h + yy) * w..][..w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src[..w - 1]),
                            1 => dst.copy_from_slice(src),
                            _ => dst[..w - 1].copy_from_slice(&src[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], cin: usize, n: usize, h: usize, w: usize) -> Vec<T> {
    let m = n * h * w;
    let mut x = vec![T::zero(); cin * n * h * w];
    for c in 0..cin {
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (c * TAPS + ky * KSIZE + kx) * m;
                for i in 0..n {
                    for yy in 0..h {
                        let sy = yy as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &cols[row + (i * h + yy) * w..][..w];
                        let dst = &mut x[((c * n + i) * h + sy as usize) * w..][..w];
                        let (d, s) = match kx {
                            0 => (&mut dst[..w - 1], &src[1..]),
                            1 => (&mut dst[..], src),
                            _ => (&mut dst[1..], &src[..w - 1]),
                        };
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += *b;
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2x2 stride-2 max pooling with floor semantics. Ties go to the first
/// window element in row-major order.
fn max_pool<T: Scalar>(x: &[T], c: usize, n: usize, h: usize, w: usize) -> (Vec<T>, Vec<u8>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); c * n * oh * ow];
    let mut arg = vec![0u8; out.len()];
    for plane in 0..c * n {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

impl<T: Scalar> Encoder for Conv4<T> {
    type Scalar = T;
    type Tape = Conv4Tape<T>;

    fn kind(&self) -> &'static str {
        "conv4"
    }

    fn input_shape(&self) -> ImageShape {
        self.config.input
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn forward(&self, images: &[&Image], mode: Mode) -> Result<(EmbeddingMatrix, Conv4Tape<T>), EncoderError> {
        self.run(images, mode, true)
    }

    fn embed(&self, images: &[&Image]) -> Result<EmbeddingMatrix, EncoderError> {
        Ok(self.run(images, Mode::Eval, false)?.0)
    }

    fn backward(&self, tape: &Conv4Tape<T>, grad: &EmbeddingMatrix) -> Vec<T> {
        let n = tape.n;
        assert_eq!(grad.nrows(), n, "gradient rows must match the forward batch");
        assert_eq!(tape.blocks.len(), self.geom.len(), "tape was recorded without activations");
        let mut gparams = vec![T::zero(); self.params.len()];

        let last = self.geom.last().expect("at least one block");
        let per = last.oh() * last.ow();
        let mut d = vec![T::zero(); last.cout * n * per];
        for i in 0..n {
            let row = grad.row(i);
            for c in 0..last.cout {
                for p in 0..per {
                    d[(c * n + i) * per + p] = T::from_f64_lossy(row[c * per + p]);
                }
            }
        }

        for (b, g) in self.geom.iter().enumerate().rev() {
            let t = &tape.blocks[b];
            let m = n * g.h * g.w;
            let (oh, ow) = (g.oh(), g.ow());

            let mut da = vec![T::zero(); g.cout * m];
            for plane in 0..g.cout * n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = plane * oh * ow + oy * ow + ox;
                        let a = t.argmax[o] as usize;
                        let pos = plane * g.h * g.w + (2 * oy + a / 2) * g.w + 2 * ox + a % 2;
                        da[pos] += d[o];
                    }
                }
            }

            let gamma = &self.params[g.gamma..g.gamma + g.cout];
            let beta = &self.params[g.beta..g.beta + g.cout];
            let mf = T::from_usize(m).expect("batch size fits");
            let mut dy = vec![T::zero(); g.cout * m];
            for c in 0..g.cout {
                let xh = &t.xhat[c * m..(c + 1) * m];
                let dac = &mut da[c * m..(c + 1) * m];
                let mut dgamma = T::zero();
                let mut dbeta = T::zero();
                for (dv, &xv) in dac.iter_mut().zip(xh) {
                    if gamma[c] * xv + beta[c] <= T::zero() {
                        *dv = T::zero();
                    }
                    dgamma += *dv * xv;
                    dbeta += *dv;
                }
                gparams[g.gamma + c] = dgamma;
                gparams[g.beta + c] = dbeta;
                let dyc = &mut dy[c * m..(c + 1) * m];
                match tape.mode {
                    Mode::Train => {
                        let scale = gamma[c] * t.inv_std[c] / mf;
                        for ((o, &dv), &xv) in dyc.iter_mut().zip(dac.iter()).zip(xh) {
                            *o = scale * (mf * dv - dbeta - xv * dgamma);
                        }
                    }
                    Mode::Eval => {
                        let scale = gamma[c] * t.inv_std[c];
                        for (o, &dv) in dyc.iter_mut().zip(dac.iter()) {
                            *o = scale * dv;
                        }
                    }
                }
            }

            let k = g.k();
            gemm(
                g.cout,
                m,
                k,
                &dy,
                Op::N,
                &t.cols,
                Op::T,
                T::zero(),
                &mut gparams[g.weight..g.weight + g.cout * k],
            );
            if b > 0 {
                let mut dcols = vec![T::zero(); k * m];
                gemm(
                    k,
                    g.cout,
                    m,
                    &self.params[g.weight..g.weight + g.cout * k],
                    Op::T,
                    &dy,
                    Op::N,
                    T::zero(),
                    &mut dcols,
                );
                d = col2im(&dcols, g.cin, n, g.h, g.w);
            }
        }
        gparams
    }

    fn commit(&mut self, tape: &Conv4Tape<T>) {
        if tape.mode != Mode::Train {
            return;
        }
        let mom = T::from_f64_lossy(self.config.bn_momentum);
        for (b, g) in self.geom.iter().enumerate() {
            let t = &tape.blocks[b];
            let m = (tape.n * g.h * g.w) as f64;
            let unbias = T::from_f64_lossy(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
            for c in 0..g.cout {
                let rm = &mut self.running_mean[b][c];
                *rm = (T::one() - mom) * *rm + mom * t.batch_mean[c];
                let rv = &mut self.running_var[b][c];
                *rv = (T::one() - mom) * *rv + mom * t.batch_var[c] * unbias;
            }
        }
    }

    fn save_tensors(&self, prefix: &str, ckpt: &mut Checkpoint) {
        if let Some(meta) = ckpt.meta.as_object_mut() {
            meta.insert(
                format!("{prefix}encoder"),
                serde_json::json!({
                    "kind": self.kind(),
                    "dtype": T::DTYPE,
                    "config": self.config,
                }),
            );
        }
        ckpt.push(format!("{prefix}params"), vec![self.params.len()], TensorData::from_scalars(&self.params));
        for b in 0..self.geom.len() {
            let len = self.running_mean[b].len();
            ckpt.push(
                format!("{prefix}running_mean.{b}"),
                vec![len],
                TensorData::from_scalars(&self.running_mean[b]),
            );
            ckpt.push(format!("{prefix}running_var.{b}"), vec![len], TensorData::from_scalars(&self.running_var[b]));
        }
    }

    fn load_tensors(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<(), EncoderError> {
        if let Some(entry) = ckpt.meta.get(format!("{prefix}encoder")) {
            if let Ok(stored) = serde_json::from_value::<EncoderConfig>(entry["config"].clone()) {
                if stored != self.config {
                    return Err(EncoderError::Checkpoint(format!(
                        "checkpoint encoder expects input {} with {} blocks x {} channels, this encoder is input {} with {} blocks x {} channels",
                        stored.input, stored.blocks, stored.channels,
                        self.config.input, self.config.blocks, self.config.channels
                    )));
                }
            }
        }
        let read = |name: String, len: usize| -> Result<Vec<T>, EncoderError> {
            let t = ckpt.tensor(&name)?;
            let v = t
                .data
                .as_scalars::<T>()
                .ok_or_else(|| EncoderError::Checkpoint(format!("tensor {name} is not {}", T::DTYPE)))?;
            if v.len() != len {
                return Err(EncoderError::Checkpoint(format!(
                    "tensor {name} holds {} values, expected {len}",
                    v.len()
                )));
            }
            Ok(v)
        };
        let params = read(format!("{prefix}params"), self.params.len())?;
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for b in 0..self.geom.len() {
            let len = self.running_mean[b].len();
            means.push(read(format!("{prefix}running_mean.{b}"), len)?);
            vars.push(read(format!("{prefix}running_var.{b}"), len)?);
        }
        self.params = params;
        self.running_mean = means;
        self.running_var = vars;
        Ok(())
    }
}
