//! Two-term objective over one pre-training batch.
//!
//! `L1` pulls every clustered view towards the mean of its own cluster
//! (softmax over negative squared distances to all cluster means). `L2`
//! pulls every view towards its source original against all `L` originals.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterAssignment;
use crate::datakit::PretrainBatch;
use crate::encoder::EmbeddingMatrix;

/// `P x E` cluster means.
pub type ClusterMeans = Array2<f64>;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("embedding has {rows} rows, batch layout needs {expected}")]
    RowMismatch { rows: usize, expected: usize },
    #[error("assignment covers {found} rows, embedding has {expected}")]
    AssignmentMismatch { found: usize, expected: usize },
    #[error("target {target} out of range for {count} anchors")]
    TargetOutOfRange { target: usize, count: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Row layout of a batch: `L` originals, then `L * Q` views origin-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLayout {
    pub originals: usize,
    pub views_per_original: usize,
}

impl BatchLayout {
    pub fn new(originals: usize, views_per_original: usize) -> Self {
        Self {
            originals,
            views_per_original,
        }
    }

    pub fn len(&self) -> usize {
        self.originals * (self.views_per_original + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.originals == 0
    }

    pub fn num_views(&self) -> usize {
        self.originals * self.views_per_original
    }

    pub fn view_row(&self, original: usize, q: usize) -> usize {
        self.originals + original * self.views_per_original + q
    }
}

impl From<&PretrainBatch> for BatchLayout {
    fn from(b: &PretrainBatch) -> Self {
        Self::new(b.num_originals(), b.views_per_original)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    /// Views that contributed to `l1` (non-noise).
    pub l1_count: usize,
    /// Views that contributed to `l2` (all of them).
    pub l2_count: usize,
    pub clusters: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Means of the rows of each cluster; noise rows are ignored.
pub fn cluster_means(e: &EmbeddingMatrix, assign: &ClusterAssignment) -> ClusterMeans {
    let mut m = Array2::zeros((assign.num_clusters(), e.ncols()));
    for (p, members) in assign.members().iter().enumerate() {
        let mut row = m.row_mut(p);
        for &j in members {
            row += &e.row(j);
        }
        row /= members.len() as f64;
    }
    m
}

/// Negative log softmax of `-d[target]` over `d = |z - anchor|^2`, plus the
/// softmax itself. Written as `d[target] + logsumexp(-d)` so that a single
/// anchor gives exactly zero.
fn cross_entropy(z: ArrayView1<f64>, anchors: ArrayView2<f64>, target: usize) -> Result<(f64, Vec<f64>), LossError> {
    let count = anchors.nrows();
    if target >= count {
        return Err(LossError::TargetOutOfRange { target, count });
    }
    let d: Vec<f64> = anchors.outer_iter().map(|a| sq_dist(z, a)).collect();
    let top = d.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = d.iter().map(|v| (-v - top).exp()).collect();
    let sum: f64 = ex.iter().sum();
    let value = d[target] + (top + sum.ln());
    Ok((value, ex.into_iter().map(|x| x / sum).collect()))
}

/// `r(z, p) = -log softmax(-|z - m|^2)[p]` over the cluster means.
pub fn term_r(z: ArrayView1<f64>, target: usize, means: &ClusterMeans) -> Result<f64, LossError> {
    Ok(cross_entropy(z, means.view(), target)?.0)
}

/// `l(z, i) = -log softmax(-|z - e|^2)[i]` over the original embeddings.
pub fn term_l(z: ArrayView1<f64>, origin: usize, originals: ArrayView2<f64>) -> Result<f64, LossError> {
    Ok(cross_entropy(z, originals, origin)?.0)
}

fn check(e: &EmbeddingMatrix, layout: BatchLayout, assign: &ClusterAssignment) -> Result<(), LossError> {
    if e.nrows() != layout.len() {
        return Err(LossError::RowMismatch {
            rows: e.nrows(),
            expected: layout.len(),
        });
    }
    if assign.len() != e.nrows() {
        return Err(LossError::AssignmentMismatch {
            found: assign.len(),
            expected: e.nrows(),
        });
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("embeddings"));
    }
    Ok(())
}

pub fn c3lr_loss(e: &EmbeddingMatrix, layout: BatchLayout, assign: &ClusterAssignment) -> Result<LossBreakdown, LossError> {
    Ok(evaluate(e, layout, assign, false)?.0)
}

/// Loss and its gradient with respect to every entry of `e`, with the
/// assignment held fixed. Gradients flow through the cluster means and
/// through the original embeddings used as `L2` anchors.
pub fn c3lr_loss_with_grad(
    e: &EmbeddingMatrix,
    layout: BatchLayout,
    assign: &ClusterAssignment,
) -> Result<(LossBreakdown, EmbeddingMatrix), LossError> {
    let (loss, grad) = evaluate(e, layout, assign, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn evaluate(
    e: &EmbeddingMatrix,
    layout: BatchLayout,
    assign: &ClusterAssignment,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<EmbeddingMatrix>), LossError> {
    check(e, layout, assign)?;
    let (l, q) = (layout.originals, layout.views_per_original);
    let means = cluster_means(e, assign);
    let originals = e.slice(ndarray::s![..l, ..]);
    let mut grad = want_grad.then(|| Array2::<f64>::zeros(e.dim()));
    let mut grad_means = Array2::<f64>::zeros(means.dim());

    let clustered: Vec<(usize, usize)> = (0..l)
        .flat_map(|i| (0..q).map(move |k| layout.view_row(i, k)))
        .filter_map(|row| assign.labels()[row].map(|p| (row, p)))
        .collect();
    let n1 = clustered.len();
    let n2 = layout.num_views();

    let mut l1 = 0.0;
    for &(row, p) in &clustered {
        let z = e.row(row);
        let (r, soft) = cross_entropy(z, means.view(), p)?;
        l1 += r;
        if let Some(g) = grad.as_mut() {
            for (k, s) in soft.iter().enumerate() {
                let coef = (f64::from(k == p) - s) / n1 as f64;
                let diff = (&z - &means.row(k)) * (2.0 * coef);
                g.row_mut(row).scaled_add(1.0, &diff);
                grad_means.row_mut(k).scaled_add(-1.0, &diff);
            }
        }
    }
    let l1 = if n1 > 0 { l1 / n1 as f64 } else { 0.0 };

    let mut l2 = 0.0;
    for i in 0..l {
        for k in 0..q {
            let row = layout.view_row(i, k);
            let z = e.row(row);
            let (v, soft) = cross_entropy(z, originals, i)?;
            l2 += v;
            if let Some(g) = grad.as_mut() {
                for (j, s) in soft.iter().enumerate() {
                    let coef = (f64::from(j == i) - s) / n2 as f64;
                    let diff = (&z - &e.row(j)) * (2.0 * coef);
                    g.row_mut(row).scaled_add(1.0, &diff);
                    g.row_mut(j).scaled_add(-1.0, &diff);
                }
            }
        }
    }
    let l2 = if n2 > 0 { l2 / n2 as f64 } else { 0.0 };

    if let Some(g) = grad.as_mut() {
        for (p, members) in assign.members().iter().enumerate() {
            let share = grad_means.row(p).to_owned() / members.len() as f64;
            for &j in members {
                g.row_mut(j).scaled_add(1.0, &share);
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite("loss gradient"));
        }
    }

    let loss = LossBreakdown {
        l1,
        l2,
        total: l1 + l2,
        l1_count: n1,
        l2_count: n2,
        clusters: assign.num_clusters(),
    };
    if !loss.total.is_finite() {
        return Err(LossError::NonFinite("loss"));
    }
    Ok((loss, grad))
}

/// Softmax mass a clustered view puts on clusters other than its own,
/// averaged over clustered views.
pub fn cross_cluster_mass(e: &EmbeddingMatrix, assign: &ClusterAssignment) -> f64 {
    let means = cluster_means(e, assign);
    let mut total = 0.0;
    let mut n = 0;
    for (row, label) in assign.labels().iter().enumerate() {
        if let Some(p) = label {
            let (_, soft) = cross_entropy(e.row(row), means.view(), *p).expect("label in range");
            total += 1.0 - soft[*p];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}
