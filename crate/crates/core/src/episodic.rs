//! Few-shot evaluation: prototypes, a prototype-initialized linear head,
//! head fine-tuning on the support set and multi-run accuracy reports.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::{sample_episode, DataError, Episode, Image, SplitData};
use crate::encoder::{EmbeddingMatrix, Encoder, EncoderError};
use crate::optim::{AdamConfig, AdamState};

/// `N x E`, row `n` is the mean support embedding of class `n`.
pub type Prototypes = Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum EpisodicError {
    #[error("class {0} has no support samples")]
    MissingClass(usize),
    #[error("label {label} out of range for {n_way} classes")]
    LabelOutOfRange { label: usize, n_way: usize },
    #[error("{0} embeddings for {1} labels")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("embedding table has {found} rows, split has {expected} samples")]
    TableMismatch { found: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 1e-3,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub runs: usize,
    /// Run `r` uses seed `seed + r`.
    pub seed: u64,
    pub finetune: FinetuneConfig,
    /// Images per encoder call when embedding a split.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            queries_per_class: 15,
            episodes: 600,
            runs: 3,
            seed: 0,
            finetune: FinetuneConfig::default(),
            chunk: 256,
        }
    }
}

impl EvalConfig {
    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }
}

pub fn prototypes_from_embeddings(
    support: ArrayView2<f64>,
    labels: &[usize],
    n_way: usize,
) -> Result<Prototypes, EpisodicError> {
    if support.nrows() != labels.len() {
        return Err(EpisodicError::LengthMismatch(support.nrows(), labels.len()));
    }
    let mut sums = Array2::zeros((n_way, support.ncols()));
    let mut counts = vec![0usize; n_way];
    for (row, &label) in support.outer_iter().zip(labels) {
        if label >= n_way {
            return Err(EpisodicError::LabelOutOfRange { label, n_way });
        }
        sums.row_mut(label).scaled_add(1.0, &row);
        counts[label] += 1;
    }
    for (n, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(EpisodicError::MissingClass(n));
        }
        sums.row_mut(n).mapv_inplace(|v| v / c as f64);
    }
    Ok(sums)
}

/// Prototypes of a labeled support set embedded by `encoder` in evaluation mode.
pub fn compute_prototypes<E: Encoder>(
    encoder: &E,
    support: &[&Image],
    labels: &[usize],
    n_way: usize,
) -> Result<Prototypes, EpisodicError> {
    let e = encoder.embed(support)?;
    prototypes_from_embeddings(e.view(), labels, n_way)
}

/// Linear classifier `logits = W z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ClassifierHead {
    pub fn n_way(&self) -> usize {
        self.w.nrows()
    }

    pub fn logits(&self, z: ArrayView1<f64>) -> Array1<f64> {
        self.w.dot(&z) + &self.b
    }

    pub fn predict(&self, z: ArrayView1<f64>) -> usize {
        argmax(self.logits(z).view())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Nearest prototype under squared Euclidean distance; ties go to the lowest index.
pub fn nearest_prototype(protos: &Prototypes, z: ArrayView1<f64>) -> usize {
    let d: Array1<f64> = protos
        .outer_iter()
        .map(|c| -c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    argmax(d.view())
}

/// `W_n = 2 c_n`, `b_n = -|c_n|^2`, so that `argmax(W z + b)` is the nearest
/// prototype.
pub fn init_head(protos: &Prototypes) -> ClassifierHead {
    ClassifierHead {
        w: protos * 2.0,
        b: protos.outer_iter().map(|c| -c.dot(&c)).collect(),
    }
}

/// Mean cross-entropy of `head` on `(z, labels)` and its gradient.
fn head_loss(head: &ClassifierHead, z: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>, Array1<f64>) {
    let n = labels.len() as f64;
    let mut dw = Array2::zeros(head.w.dim());
    let mut db = Array1::zeros(head.b.len());
    let mut loss = 0.0;
    for (row, &y) in z.outer_iter().zip(labels) {
        let logits = head.logits(row);
        let top = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let ex = logits.mapv(|v| (v - top).exp());
        let sum = ex.sum();
        loss += top + sum.ln() - logits[y];
        for k in 0..head.n_way() {
            let g = (ex[k] / sum - f64::from(k == y)) / n;
            dw.row_mut(k).scaled_add(g, &row);
            db[k] += g;
        }
    }
    (loss / n, dw, db)
}

/// Full-batch Adam on the support cross-entropy with the encoder frozen.
/// Returns the tuned head and the loss before each epoch.
pub fn finetune_head(
    head: &ClassifierHead,
    support: ArrayView2<f64>,
    labels: &[usize],
    cfg: &FinetuneConfig,
) -> (ClassifierHead, Vec<f64>) {
    let mut head = head.clone();
    let (rows, cols) = head.w.dim();
    let mut state = AdamState::new(rows * cols + rows);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (loss, dw, db) = head_loss(&head, support, labels);
        history.push(loss);
        let mut params: Vec<f64> = head.w.iter().chain(head.b.iter()).copied().collect();
        let grad: Vec<f64> = dw.iter().chain(db.iter()).copied().collect();
        state.step(&cfg.adam, cfg.lr, &mut params, &grad);
        head.w = Array2::from_shape_vec((rows, cols), params[..rows * cols].to_vec()).expect("shape");
        head.b = Array1::from(params[rows * cols..].to_vec());
    }
    (head, history)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub accuracy: f64,
    /// Mean query cross-entropy of the fine-tuned head.
    pub query_loss: f64,
}

/// Runs one episode, given the embeddings of the whole split.
pub fn run_episode(table: &EmbeddingMatrix, episode: &Episode, ft: &FinetuneConfig) -> Result<EpisodeOutcome, EpisodicError> {
    let gather = |items: &[crate::datakit::EpisodeItem]| -> Array2<f64> {
        let mut out = Array2::zeros((items.len(), table.ncols()));
        for (r, it) in items.iter().enumerate() {
            out.row_mut(r).assign(&table.row(it.index));
        }
        out
    };
    let support = gather(&episode.support);
    let s_labels: Vec<usize> = episode.support.iter().map(|i| i.label).collect();
    let protos = prototypes_from_embeddings(support.view(), &s_labels, episode.n_way)?;
    let head = init_head(&protos);
    let (head, _) = finetune_head(&head, support.view(), &s_labels, ft);
    let query = gather(&episode.query);
    let q_labels: Vec<usize> = episode.query.iter().map(|i| i.label).collect();
    let correct = q_labels
        .iter()
        .zip(query.outer_iter())
        .filter(|(&y, z)| head.predict(*z) == y)
        .count();
    let (query_loss, _, _) = head_loss(&head, query.view(), &q_labels);
    Ok(EpisodeOutcome {
        accuracy: correct as f64 / episode.query.len() as f64,
        query_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub seed: u64,
    pub mean: f64,
    pub ci95: f64,
    pub query_loss: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episodes_per_run: usize,
    pub finetune_epochs: usize,
    pub runs: Vec<RunStats>,
    /// Mean over all pooled episode accuracies.
    pub mean: f64,
    /// Sample standard deviation of the pooled accuracies.
    pub std: f64,
    /// `1.96 * std / sqrt(n)` over the pooled accuracies.
    pub ci95: f64,
    pub query_loss: f64,
    /// Mean of the per-run means and `1.96 * std / sqrt(runs)` over them.
    pub run_mean: f64,
    pub run_ci95: f64,
}

/// `(mean, sample std, 1.96 * std / sqrt(n))`; the spread is 0 for `n <= 1`.
pub fn mean_and_ci(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    (mean, std, 1.96 * std / (n as f64).sqrt())
}

impl EvalReport {
    pub fn num_episodes(&self) -> usize {
        self.runs.iter().map(|r| r.accuracies.len()).sum()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{}-way {}-shot, {} queries/class, {} episodes x {} runs, {} fine-tune epochs",
            self.n_way,
            self.k_shot,
            self.queries_per_class,
            self.episodes_per_run,
            self.runs.len(),
            self.finetune_epochs
        );
        let _ = writeln!(s, "{:>6} {:>12} {:>10} {:>9}", "run", "seed", "accuracy", "ci95");
        for (i, r) in self.runs.iter().enumerate() {
            let _ = writeln!(s, "{:>6} {:>12} {:>9.2}% {:>8.2}%", i, r.seed, 100.0 * r.mean, 100.0 * r.ci95);
        }
        let _ = writeln!(s, "{:>6} {:>12} {:>9.2}% {:>8.2}%", "pooled", "", 100.0 * self.mean, 100.0 * self.ci95);
        let _ = writeln!(
            s,
            "{:>6} {:>12} {:>9.2}% {:>8.2}%",
            "runs",
            "",
            100.0 * self.run_mean,
            100.0 * self.run_ci95
        );
        s
    }
}

/// Evaluates precomputed split embeddings (row `i` embeds `split.samples[i]`).
pub fn evaluate_embeddings(table: &EmbeddingMatrix, split: &SplitData, cfg: &EvalConfig) -> Result<EvalReport, EpisodicError> {
    if table.nrows() != split.len() {
        return Err(EpisodicError::TableMismatch {
            found: table.nrows(),
            expected: split.len(),
        });
    }
    let mut runs = Vec::with_capacity(cfg.runs);
    for seed in cfg.run_seeds() {
        let outcomes = (0..cfg.episodes)
            .into_par_iter()
            .map(|ep| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ep as u64);
                let episode = sample_episode(split, cfg.n_way, cfg.k_shot, cfg.queries_per_class, &mut rng)?;
                run_episode(table, &episode, &cfg.finetune)
            })
            .collect::<Result<Vec<EpisodeOutcome>, EpisodicError>>()?;
        let accuracies: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
        let (mean, _, ci95) = mean_and_ci(&accuracies);
        let query_loss = outcomes.iter().map(|o| o.query_loss).sum::<f64>() / outcomes.len().max(1) as f64;
        runs.push(RunStats {
            seed,
            mean,
            ci95,
            query_loss,
            accuracies,
        });
    }
    let pooled: Vec<f64> = runs.iter().flat_map(|r| r.accuracies.iter().copied()).collect();
    let (mean, std, ci95) = mean_and_ci(&pooled);
    let means: Vec<f64> = runs.iter().map(|r| r.mean).collect();
    let (run_mean, _, run_ci95) = mean_and_ci(&means);
    let query_loss = runs.iter().map(|r| r.query_loss).sum::<f64>() / runs.len().max(1) as f64;
    Ok(EvalReport {
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        queries_per_class: cfg.queries_per_class,
        episodes_per_run: cfg.episodes,
        finetune_epochs: cfg.finetune.epochs,
        runs,
        mean,
        std,
        ci95,
        query_loss,
        run_mean,
        run_ci95,
    })
}

/// Embeds the split once in evaluation mode, then evaluates episodes on it.
pub fn evaluate<E: Encoder>(encoder: &E, split: &SplitData, cfg: &EvalConfig) -> Result<EvalReport, EpisodicError> {
    let table = encoder.embed_chunked(&split.images(), cfg.chunk)?;
    evaluate_embeddings(&table, split, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn prototypes_are_means() {
        let s = array![[0.0, 0.0], [2.0, 2.0], [5.0, 1.0]];
        let c = prototypes_from_embeddings(s.view(), &[0, 0, 1], 2).unwrap();
        assert_eq!(c, array![[1.0, 1.0], [5.0, 1.0]]);
        assert!(matches!(
            prototypes_from_embeddings(s.view(), &[0, 0, 0], 2),
            Err(EpisodicError::MissingClass(1))
        ));
    }

    #[test]
    fn head_formulas() {
        let h = init_head(&array![[1.0, 0.0], [0.0, 0.0]]);
        assert_eq!(h.w, array![[2.0, 0.0], [0.0, 0.0]]);
        assert_eq!(h.b, array![-1.0, 0.0]);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let h = init_head(&array![[1.0, 0.0], [0.0, 1.0]]);
        let (t, hist) = finetune_head(&h, array![[1.0, 0.1]].view(), &[0], &FinetuneConfig { epochs: 0, ..Default::default() });
        assert_eq!(t, h);
        assert!(hist.is_empty());
    }

    #[test]
    fn ci_of_single_value_is_zero() {
        assert_eq!(mean_and_ci(&[0.4]), (0.4, 0.0, 0.0));
        let (m, s, c) = mean_and_ci(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((c - 1.96 * s / 2f64.sqrt()).abs() < 1e-15);
    }
}
