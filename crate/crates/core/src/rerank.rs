//! k-reciprocal re-ranking of pairwise embedding distances.
//!
//! Steps: k1-reciprocal neighbor sets with candidate expansion, Gaussian
//! membership vectors, local query expansion over k2 neighbors, Jaccard
//! distance between the expanded vectors, and a blend with the rescaled base
//! distance. The blended matrix is symmetrized for the clustering stage.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingMatrix;

/// `B x B`, symmetric, zero diagonal, non-negative.
pub type DistanceMatrix = Array2<f64>;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RerankError {
    #[error("need at least 2 embeddings, got {0}")]
    TooFewPoints(usize),
    #[error("embedding row {row} holds a non-finite value")]
    NonFinite { row: usize },
    #[error("k1 = {k1} needs a batch larger than k1, got B = {b}; use RerankConfig::clipped")]
    BatchTooSmall { k1: usize, b: usize },
    #[error("invalid rerank config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankConfig {
    /// Checks `1 <= k2 <= k1 < b` and `0 <= lambda <= 1`.
    pub fn validate(&self, b: usize) -> Result<(), RerankError> {
        if self.k1 == 0 || self.k2 == 0 || self.k2 > self.k1 {
            return Err(RerankError::Config(format!(
                "need 1 <= k2 <= k1, got k1 = {}, k2 = {}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RerankError::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.k1 >= b {
            return Err(RerankError::BatchTooSmall { k1: self.k1, b });
        }
        Ok(())
    }

    /// `k1 = min(k1, b - 1)`, `k2 = min(k2, k1)`.
    pub fn clipped(&self, b: usize) -> Self {
        let k1 = self.k1.min(b.saturating_sub(1)).max(1);
        Self {
            k1,
            k2: self.k2.min(k1).max(1),
            lambda: self.lambda,
        }
    }
}

/// Intermediate matrices of one re-ranking, kept for debug dumps.
#[derive(Debug, Clone)]
pub struct RerankParts {
    /// Squared Euclidean distances.
    pub base: DistanceMatrix,
    /// `base / max(base)`.
    pub scaled: DistanceMatrix,
    /// Jaccard distances between expanded membership vectors.
    pub jaccard: DistanceMatrix,
    /// Symmetrized blend.
    pub combined: DistanceMatrix,
}

pub fn pairwise_sq_euclidean(e: &EmbeddingMatrix) -> Result<DistanceMatrix, RerankError> {
    let b = e.nrows();
    if b < 2 {
        return Err(RerankError::TooFewPoints(b));
    }
    if let Some(row) = e.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(RerankError::NonFinite { row });
    }
    let mut d = Array2::zeros((b, b));
    for i in 0..b {
        for j in i + 1..b {
            let s: f64 = e.row(i).iter().zip(e.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    Ok(d)
}

pub fn rerank(e: &EmbeddingMatrix, cfg: &RerankConfig) -> Result<DistanceMatrix, RerankError> {
    Ok(rerank_parts(e, cfg)?.combined)
}

pub fn rerank_parts(e: &EmbeddingMatrix, cfg: &RerankConfig) -> Result<RerankParts, RerankError> {
    let base = pairwise_sq_euclidean(e)?;
    rerank_distances(base, cfg)
}

/// Re-ranks a precomputed squared-distance matrix.
pub fn rerank_distances(base: DistanceMatrix, cfg: &RerankConfig) -> Result<RerankParts, RerankError> {
    let b = base.nrows();
    if b < 2 {
        return Err(RerankError::TooFewPoints(b));
    }
    cfg.validate(b)?;
    let max = base.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        let zero = Array2::zeros((b, b));
        return Ok(RerankParts {
            base,
            scaled: zero.clone(),
            jaccard: zero.clone(),
            combined: zero,
        });
    }
    let scaled = &base / max;
    let ranks = neighbor_ranks(&scaled);
    let v = membership(&scaled, &ranks, cfg.k1);
    let vbar = query_expansion(&v, &ranks, cfg.k2);
    let jaccard = sparse_jaccard(&vbar);
    let combined = blend(&scaled, &jaccard, cfg.lambda);
    Ok(RerankParts {
        base,
        scaled,
        jaccard,
        combined,
    })
}

/// Row `i` lists all indices by `(j != i, d[i, j], j)`: self first, then
/// ascending distance, ties by index.
pub(crate) fn neighbor_ranks(d: &DistanceMatrix) -> Vec<Vec<usize>> {
    let b = d.nrows();
    (0..b)
        .map(|i| {
            let mut idx: Vec<usize> = (0..b).collect();
            idx.sort_by(|&x, &y| {
                (x != i)
                    .cmp(&(y != i))
                    .then(d[[i, x]].total_cmp(&d[[i, y]]))
                    .then(x.cmp(&y))
            });
            idx
        })
        .collect()
}

/// Members `j` of the `k`-neighborhood of `i` whose own `k`-neighborhood
/// contains `i`. A `k`-neighborhood is the first `k` entries of the rank list,
/// so it always holds the point itself.
pub(crate) fn reciprocal_set(ranks: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    ranks[i][..k]
        .iter()
        .copied()
        .filter(|&j| ranks[j][..k].contains(&i))
        .collect()
}

/// Half-size neighborhood used when expanding a reciprocal set.
pub(crate) fn half_k(k1: usize) -> usize {
    (k1 + 1) / 2
}

/// `3 |cand ∩ core| >= 2 |cand|`.
pub(crate) fn overlaps_enough(candidate: &[usize], core: &[usize]) -> bool {
    let shared = candidate.iter().filter(|c| core.contains(c)).count();
    3 * shared >= 2 * candidate.len()
}

fn expanded_set(ranks: &[Vec<usize>], i: usize, k1: usize) -> Vec<usize> {
    let core = reciprocal_set(ranks, i, k1);
    let mut out = core.clone();
    let half = half_k(k1);
    for &c in &core {
        let cand = reciprocal_set(ranks, c, half);
        if overlaps_enough(&cand, &core) {
            out.extend(cand);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn membership(scaled: &DistanceMatrix, ranks: &[Vec<usize>], k1: usize) -> Array2<f64> {
    let b = scaled.nrows();
    let mut v = Array2::zeros((b, b));
    for i in 0..b {
        for j in expanded_set(ranks, i, k1) {
            v[[i, j]] = (-scaled[[i, j]]).exp();
        }
    }
    v
}

fn query_expansion(v: &Array2<f64>, ranks: &[Vec<usize>], k2: usize) -> Array2<f64> {
    let b = v.nrows();
    let mut out = Array2::zeros((b, b));
    for i in 0..b {
        let mut row = out.row_mut(i);
        for &j in &ranks[i][..k2] {
            row += &v.row(j);
        }
        row /= k2 as f64;
    }
    out
}

/// Jaccard distance through an inverted index over non-zero columns, using
/// `sum(max(a, b)) = sum(a) + sum(b) - sum(min(a, b))`.
fn sparse_jaccard(v: &Array2<f64>) -> DistanceMatrix {
    let b = v.nrows();
    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); b];
    for ((i, m), &x) in v.indexed_iter() {
        if x > 0.0 {
            inverted[m].push((i, x));
        }
    }
    let sums: Vec<f64> = v.sum_axis(Axis(1)).to_vec();
    let mut out = Array2::zeros((b, b));
    let mut mins = vec![0.0; b];
    for i in 0..b {
        mins.iter_mut().for_each(|x| *x = 0.0);
        for (m, &a) in v.row(i).iter().enumerate() {
            if a > 0.0 {
                for &(j, c) in &inverted[m] {
                    mins[j] += a.min(c);
                }
            }
        }
        for j in 0..b {
            let maxes = (sums[i] + sums[j] - mins[j]).max(0.0);
            out[[i, j]] = if maxes > 0.0 {
                (1.0 - mins[j] / maxes).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    out
}

fn blend(scaled: &DistanceMatrix, jaccard: &DistanceMatrix, lambda: f64) -> DistanceMatrix {
    let b = scaled.nrows();
    let star = scaled * lambda + jaccard * (1.0 - lambda);
    let mut r = Array2::zeros((b, b));
    for i in 0..b {
        for j in i + 1..b {
            let s = (0.5 * (star[[i, j]] + star[[j, i]])).max(0.0);
            r[[i, j]] = s;
            r[[j, i]] = s;
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn squared_distances() {
        let d = pairwise_sq_euclidean(&array![[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(d[[0, 1]], 25.0);
        assert_eq!(d[[1, 0]], 25.0);
        assert_eq!(d[[0, 0]], 0.0);
    }

    #[test]
    fn identical_rows() {
        let e = Array2::from_elem((5, 3), 1.5);
        assert!(pairwise_sq_euclidean(&e).unwrap().iter().all(|&x| x == 0.0));
        let cfg = RerankConfig { k1: 3, k2: 2, lambda: 0.3 };
        assert!(rerank(&e, &cfg).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(pairwise_sq_euclidean(&array![[1.0]]), Err(RerankError::TooFewPoints(1)));
        assert_eq!(
            pairwise_sq_euclidean(&array![[1.0], [f64::NAN]]),
            Err(RerankError::NonFinite { row: 1 })
        );
        let e = array![[0.0], [1.0], [2.0]];
        assert_eq!(rerank(&e, &RerankConfig::default()), Err(RerankError::BatchTooSmall { k1: 20, b: 3 }));
        assert!(rerank(&e, &RerankConfig::default().clipped(3)).is_ok());
        assert!(matches!(
            rerank(&e, &RerankConfig { k1: 2, k2: 1, lambda: 1.5 }),
            Err(RerankError::Config(_))
        ));
    }

    #[test]
    fn clipping() {
        let c = RerankConfig::default().clipped(5);
        assert_eq!((c.k1, c.k2), (4, 4));
        let c = RerankConfig::default().clipped(64);
        assert_eq!((c.k1, c.k2), (20, 6));
    }

    #[test]
    fn two_pairs_on_a_line() {
        let e = array![[0.0], [0.1], [10.0], [10.1]];
        let cfg = RerankConfig { k1: 2, k2: 1, lambda: 0.3 };
        let parts = rerank_parts(&e, &cfg).unwrap();
        let r = &parts.combined;
        let within = r[[0, 1]].max(r[[2, 3]]);
        let across = [r[[0, 2]], r[[0, 3]], r[[1, 2]], r[[1, 3]]];
        assert!(across.iter().all(|&x| within < x));
        for (i, j) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
            assert_eq!(parts.jaccard[[i, j]], 1.0);
        }
    }

    #[test]
    fn lambda_one_is_scaled_base() {
        let e = array![[0.0, 1.0], [2.0, 0.5], [3.0, 3.0], [-1.0, 0.0], [0.5, 0.5]];
        let cfg = RerankConfig { k1: 3, k2: 2, lambda: 1.0 };
        let parts = rerank_parts(&e, &cfg).unwrap();
        for ((i, j), &x) in parts.combined.indexed_iter() {
            assert!((x - parts.scaled[[i, j]]).abs() < 1e-15);
        }
    }
}
