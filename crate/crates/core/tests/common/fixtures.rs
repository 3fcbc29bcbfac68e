//! Generators and fixture loaders shared by the test targets.

use c3lr::cluster::{hdbscan, ClusterAssignment, ClusterConfig};
use c3lr::loss::{c3lr_loss, c3lr_loss_with_grad, BatchLayout};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub struct LossInstance {
    pub e: Array2<f64>,
    pub layout: BatchLayout,
    pub assign: ClusterAssignment,
}

pub fn random_loss_instance(rng: &mut ChaCha8Rng, max_l: usize, max_q: usize, max_e: usize, max_p: usize) -> LossInstance {
    let l = rng.random_range(1..=max_l);
    let q = rng.random_range(1..=max_q);
    let dim = rng.random_range(1..=max_e);
    let layout = BatchLayout::new(l, q);
    let b = layout.len();
    let e = Array2::from_shape_fn((b, dim), |_| rng.random_range(-1.5..1.5));
    let p = rng.random_range(1..=max_p.min(b));
    // Every cluster gets one guaranteed member, the rest are random or noise.
    let mut labels: Vec<Option<usize>> = (0..b)
        .map(|_| if rng.random_bool(0.15) { None } else { Some(rng.random_range(0..p)) })
        .collect();
    let mut order: Vec<usize> = (0..b).collect();
    use rand::seq::SliceRandom;
    order.shuffle(rng);
    for (c, &row) in order.iter().take(p).enumerate() {
        labels[row] = Some(c);
    }
    LossInstance {
        e,
        layout,
        assign: ClusterAssignment::from_labels(labels),
    }
}

pub fn rows(e: &Array2<f64>) -> Vec<Vec<f64>> {
    e.outer_iter().map(|r| r.to_vec()).collect()
}

/// Worst relative error over all entries between the analytic gradient and
/// central differences with step `h`.
pub fn gradient_error(inst: &LossInstance, h: f64) -> f64 {
    let (_, grad) = c3lr_loss_with_grad(&inst.e, inst.layout, &inst.assign).unwrap();
    let mut worst = 0.0f64;
    for idx in 0..inst.e.len() {
        let (i, j) = (idx / inst.e.ncols(), idx % inst.e.ncols());
        let mut plus = inst.e.clone();
        plus[[i, j]] += h;
        let mut minus = inst.e.clone();
        minus[[i, j]] -= h;
        let fp = c3lr_loss(&plus, inst.layout, &inst.assign).unwrap().total;
        let fm = c3lr_loss(&minus, inst.layout, &inst.assign).unwrap().total;
        let fd = (fp - fm) / (2.0 * h);
        let g = grad[[i, j]];
        worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-8));
    }
    worst
}

pub fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

pub fn random_rows(rng: &mut ChaCha8Rng, b: usize, e: usize) -> Vec<Vec<f64>> {
    // A few loose groups so that reciprocal sets and expansions are non-trivial.
    let groups = rng.random_range(1..=4);
    let centers: Vec<Vec<f64>> = (0..groups).map(|_| (0..e).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    (0..b)
        .map(|_| {
            let c = &centers[rng.random_range(0..groups)];
            c.iter().map(|x| x + rng.random_range(-1.0..1.0)).collect()
        })
        .collect()
}

#[derive(Deserialize)]
pub struct HdbscanInstance {
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub truth: Vec<i64>,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub allow_single_cluster: bool,
    pub labels: Vec<i64>,
    pub tie_sensitive: bool,
}

#[derive(Deserialize)]
pub struct HdbscanFixtures {
    pub blobs: Vec<HdbscanInstance>,
    pub small: Vec<HdbscanInstance>,
}

pub fn hdbscan_fixtures() -> HdbscanFixtures {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/hdbscan_reference.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn euclid(points: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), points.len()), |(i, j)| {
        let mut s = 0.0;
        for k in 0..points[i].len() {
            s += (points[i][k] - points[j][k]).powi(2);
        }
        s.sqrt()
    })
}

/// Renumbers clusters by first appearance so labelings compare directly.
pub fn canonical(labels: &[i64]) -> Vec<i64> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                -1
            } else {
                let next = map.len() as i64;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}

pub fn run_hdbscan(inst: &HdbscanInstance) -> Vec<i64> {
    let cfg = ClusterConfig {
        min_cluster_size: inst.min_cluster_size,
        min_samples: Some(inst.min_samples),
        allow_single_cluster: inst.allow_single_cluster,
    };
    canonical(&hdbscan(&euclid(&inst.points), &cfg).unwrap().codes())
}
