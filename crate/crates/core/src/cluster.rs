//! HDBSCAN over a precomputed dissimilarity matrix.
//!
//! Mutual reachability, Prim's minimum spanning tree on the dense matrix,
//! single-linkage dendrogram, condensed tree at `min_cluster_size` and
//! excess-of-mass selection. Tree construction and selection follow the
//! reference implementation closely so that partitions agree on the same input.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::rerank::DistanceMatrix;

/// Smallest distance used when converting merge heights to `lambda = 1/d`.
const MIN_DISTANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClusterError {
    #[error("distance matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("distance matrix entry ({0}, {1}) is negative or non-finite")]
    InvalidEntry(usize, usize),
    #[error("min_samples = {min_samples} needs more than {min_samples} points, got {b}")]
    MinSamplesTooLarge { min_samples: usize, b: usize },
    #[error("invalid cluster config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub min_cluster_size: usize,
    /// Neighbors (excluding the point itself) that define the core distance.
    /// `None` means `min_cluster_size`.
    #[serde(default)]
    pub min_samples: Option<usize>,
    #[serde(default = "yes")]
    pub allow_single_cluster: bool,
}

fn yes() -> bool {
    true
}

impl ClusterConfig {
    /// `min_cluster_size = q + 1`: one original and its `q` views.
    pub fn for_views(q: usize) -> Self {
        Self {
            min_cluster_size: q + 1,
            min_samples: None,
            allow_single_cluster: true,
        }
    }

    pub fn min_samples(&self) -> usize {
        self.min_samples.unwrap_or(self.min_cluster_size)
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.min_cluster_size < 2 {
            return Err(ClusterError::Config(format!(
                "min_cluster_size must be >= 2, got {}",
                self.min_cluster_size
            )));
        }
        if self.min_samples() < 1 {
            return Err(ClusterError::Config("min_samples must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self::for_views(3)
    }
}

/// Flat partition of a batch. Labels are 0-based cluster indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    labels: Vec<Option<usize>>,
    members: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    /// Builds an assignment from per-row labels. Cluster ids must be dense:
    /// every id below the maximum has at least one member.
    pub fn from_labels(labels: Vec<Option<usize>>) -> Self {
        let p = labels.iter().flatten().map(|&l| l + 1).max().unwrap_or(0);
        let mut members = vec![Vec::new(); p];
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = l {
                members[*l].push(i);
            }
        }
        assert!(members.iter().all(|m| !m.is_empty()), "cluster ids must be dense");
        Self { labels, members }
    }

    pub fn all_noise(b: usize) -> Self {
        Self {
            labels: vec![None; b],
            members: Vec::new(),
        }
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn noise_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.noise_count() as f64 / self.labels.len() as f64
        }
    }

    /// Labels with `-1` for noise.
    pub fn codes(&self) -> Vec<i64> {
        self.labels.iter().map(|l| l.map_or(-1, |v| v as i64)).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }
}

/// One row of the condensed tree: `child` (a point id below `B`, or a
/// cluster id `>= B`) leaves `parent` at `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondensedEdge {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedTree {
    pub num_points: usize,
    pub edges: Vec<CondensedEdge>,
    /// `(cluster id, stability)` for every cluster node, ascending id.
    pub stability: Vec<(usize, f64)>,
    /// Selected cluster node ids, ascending; position = flat label.
    pub selected: Vec<usize>,
}

fn check_matrix(r: &DistanceMatrix) -> Result<usize, ClusterError> {
    let (n, m) = r.dim();
    if n != m {
        return Err(ClusterError::NotSquare(n, m));
    }
    if let Some(((i, j), _)) = r.indexed_iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(ClusterError::InvalidEntry(i, j));
    }
    Ok(n)
}

/// Distance from each point to its `min_samples`-th nearest other point.
pub fn core_distances(r: &DistanceMatrix, min_samples: usize) -> Result<Vec<f64>, ClusterError> {
    let b = check_matrix(r)?;
    if min_samples >= b {
        return Err(ClusterError::MinSamplesTooLarge { min_samples, b });
    }
    Ok((0..b)
        .map(|i| {
            let mut row: Vec<f64> = (0..b).filter(|&j| j != i).map(|j| r[[i, j]]).collect();
            row.sort_by(f64::total_cmp);
            if min_samples == 0 {
                0.0
            } else {
                row[min_samples - 1]
            }
        })
        .collect())
}

/// `MR[i, j] = max(core_i, core_j, R[i, j])`, zero diagonal.
pub fn mutual_reachability(r: &DistanceMatrix, min_samples: usize) -> Result<DistanceMatrix, ClusterError> {
    let core = core_distances(r, min_samples)?;
    let b = core.len();
    Ok(DistanceMatrix::from_shape_fn((b, b), |(i, j)| {
        if i == j {
            0.0
        } else {
            core[i].max(core[j]).max(r[[i, j]])
        }
    }))
}

/// Prim's algorithm from point 0. Each step adds the outside point with the
/// smallest reachability to the tree (ties to the smallest index) and emits
/// `(previous point, new point, reachability)`. Single linkage over these
/// chain edges equals single linkage over the true spanning tree.
fn prim_chain(mr: &DistanceMatrix) -> Vec<(usize, usize, f64)> {
    let b = mr.nrows();
    let mut in_tree = vec![false; b];
    let mut reach = vec![f64::INFINITY; b];
    let mut edges = Vec::with_capacity(b.saturating_sub(1));
    let mut current = 0;
    for _ in 1..b {
        in_tree[current] = true;
        let mut best = usize::MAX;
        for j in 0..b {
            if in_tree[j] {
                continue;
            }
            reach[j] = reach[j].min(mr[[current, j]]);
            if best == usize::MAX || reach[j] < reach[best] {
                best = j;
            }
        }
        edges.push((current, best, reach[best]));
        current = best;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Internal dendrogram node; node `k` has id `B + k`.
#[derive(Debug, Clone)]
struct Merge {
    children: Vec<usize>,
    distance: f64,
    size: usize,
}

/// Single-linkage dendrogram. All spanning-tree edges of one weight are
/// applied at once, so components that join at the same height become
/// children of a single node. The tree then depends only on the connected
/// components of each threshold graph, not on the order of tied edges.
fn single_linkage(b: usize, mut edges: Vec<(usize, usize, f64)>) -> Vec<Merge> {
    edges.sort_by(|x, y| x.2.total_cmp(&y.2));
    let mut top = UnionFind::new(2 * b);
    let mut sizes = vec![1usize; b];
    let mut merges: Vec<Merge> = Vec::new();
    let mut start = 0;
    while start < edges.len() {
        let w = edges[start].2;
        let end = start + edges[start..].iter().take_while(|e| e.2 == w).count();
        let mut group = UnionFind::new(2 * b);
        let mut touched = Vec::new();
        for &(a, c, _) in &edges[start..end] {
            let (ra, rc) = (top.find(a), top.find(c));
            group.union(ra, rc);
            touched.push(ra);
            touched.push(rc);
        }
        touched.sort_unstable();
        touched.dedup();
        let mut by_rep: Vec<(usize, Vec<usize>)> = Vec::new();
        for r in touched {
            let rep = group.find(r);
            match by_rep.iter_mut().find(|(k, _)| *k == rep) {
                Some((_, v)) => v.push(r),
                None => by_rep.push((rep, vec![r])),
            }
        }
        for (_, children) in by_rep.into_iter().filter(|(_, v)| v.len() > 1) {
            let id = b + merges.len();
            let size = children.iter().map(|&c| sizes[c]).sum();
            for &c in &children {
                top.parent[c] = id;
            }
            sizes.push(size);
            merges.push(Merge {
                children,
                distance: w,
                size,
            });
        }
        start = end;
    }
    merges
}

/// Level-order traversal of the dendrogram below `root`.
fn bfs_dendrogram(merges: &[Merge], b: usize, root: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut queue = vec![root];
    while !queue.is_empty() {
        out.extend_from_slice(&queue);
        queue = queue
            .iter()
            .filter(|&&x| x >= b)
            .flat_map(|&x| merges[x - b].children.iter().copied())
            .collect();
    }
    out
}

fn condense(merges: &[Merge], b: usize, min_cluster_size: usize) -> Vec<CondensedEdge> {
    let root = b + merges.len() - 1;
    let mut relabel = vec![0usize; root + 1];
    relabel[root] = b;
    let mut next_label = b + 1;
    let mut ignore = vec![false; root + 1];
    let mut out = Vec::new();
    let size_of = |x: usize| if x >= b { merges[x - b].size } else { 1 };

    for node in bfs_dendrogram(merges, b, root) {
        if ignore[node] || node < b {
            continue;
        }
        let merge = &merges[node - b];
        let lambda = 1.0 / merge.distance.max(MIN_DISTANCE);
        let parent = relabel[node];
        let large: Vec<usize> = merge
            .children
            .iter()
            .copied()
            .filter(|&c| size_of(c) >= min_cluster_size)
            .collect();
        for &child in &merge.children {
            if large.contains(&child) {
                if large.len() == 1 {
                    relabel[child] = parent;
                } else {
                    relabel[child] = next_label;
                    next_label += 1;
                    out.push(CondensedEdge {
                        parent,
                        child: relabel[child],
                        lambda,
                        size: size_of(child),
                    });
                }
            } else {
                for s in bfs_dendrogram(merges, b, child) {
                    if s < b {
                        out.push(CondensedEdge {
                            parent,
                            child: s,
                            lambda,
                            size: 1,
                        });
                    }
                    ignore[s] = true;
                }
            }
        }
    }
    out
}

fn stabilities(edges: &[CondensedEdge], b: usize) -> Vec<(usize, f64)> {
    let top = edges.iter().map(|e| e.parent).max().unwrap_or(b);
    let mut births = vec![0.0; top.max(edges.iter().map(|e| e.child).max().unwrap_or(b)) + 1];
    for e in edges {
        births[e.child] = e.lambda;
    }
    births[b] = 0.0;
    let mut stab = vec![0.0; top - b + 1];
    for e in edges {
        stab[e.parent - b] += (e.lambda - births[e.parent]) * e.size as f64;
    }
    stab.into_iter().enumerate().map(|(k, s)| (b + k, s)).collect()
}

fn excess_of_mass(edges: &[CondensedEdge], stability: &[(usize, f64)], b: usize, allow_single: bool) -> Vec<usize> {
    let mut stab: HashMap<usize, f64> = stability.iter().copied().collect();
    let mut children: HashMap<usize, Vec<usize>> = HashMap::new();
    for e in edges.iter().filter(|e| e.size > 1) {
        children.entry(e.parent).or_default().push(e.child);
    }
    let mut nodes: Vec<usize> = stability.iter().map(|s| s.0).filter(|&c| allow_single || c != b).collect();
    nodes.sort_unstable_by(|x, y| y.cmp(x));
    let mut is_cluster: HashMap<usize, bool> = nodes.iter().map(|&c| (c, true)).collect();
    for &node in &nodes {
        let kids = children.get(&node).cloned().unwrap_or_default();
        let subtree: f64 = kids.iter().map(|c| stab[c]).sum();
        if subtree > stab[&node] {
            is_cluster.insert(node, false);
            stab.insert(node, subtree);
        } else {
            let mut queue = kids;
            while let Some(c) = queue.pop() {
                is_cluster.insert(c, false);
                if let Some(k) = children.get(&c) {
                    queue.extend(k);
                }
            }
        }
    }
    let mut selected: Vec<usize> = is_cluster.into_iter().filter(|(_, v)| *v).map(|(c, _)| c).collect();
    selected.sort_unstable();
    selected
}

fn label_points(edges: &[CondensedEdge], selected: &[usize], b: usize) -> Vec<Option<usize>> {
    let mut parent_of = HashMap::new();
    let mut point_lambda = vec![0.0; b];
    for e in edges {
        parent_of.insert(e.child, e.parent);
        if e.child < b {
            point_lambda[e.child] = e.lambda;
        }
    }
    let index: HashMap<usize, usize> = selected.iter().enumerate().map(|(k, &c)| (c, k)).collect();
    let root_threshold = edges
        .iter()
        .filter(|e| e.parent == b)
        .map(|e| e.lambda)
        .fold(f64::NEG_INFINITY, f64::max);
    (0..b)
        .map(|p| {
            let mut c = parent_of[&p];
            while c != b && !index.contains_key(&c) {
                c = parent_of[&c];
            }
            if c != b {
                Some(index[&c])
            } else if index.contains_key(&b) && point_lambda[p] >= root_threshold {
                Some(index[&b])
            } else {
                None
            }
        })
        .collect()
}

pub fn hdbscan(r: &DistanceMatrix, cfg: &ClusterConfig) -> Result<ClusterAssignment, ClusterError> {
    Ok(hdbscan_with_tree(r, cfg)?.0)
}

/// [`hdbscan`] plus the condensed tree it selected from. `min_samples` is
/// clipped to `B - 1`.
pub fn hdbscan_with_tree(
    r: &DistanceMatrix,
    cfg: &ClusterConfig,
) -> Result<(ClusterAssignment, Option<CondensedTree>), ClusterError> {
    cfg.validate()?;
    let b = check_matrix(r)?;
    if b < cfg.min_cluster_size || b < 2 {
        log::warn!(
            "batch of {b} points is smaller than min_cluster_size = {}; every point is noise",
            cfg.min_cluster_size
        );
        return Ok((ClusterAssignment::all_noise(b), None));
    }
    let mr = mutual_reachability(r, cfg.min_samples().min(b - 1))?;
    let merges = single_linkage(b, prim_chain(&mr));
    let edges = condense(&merges, b, cfg.min_cluster_size);
    let stability = stabilities(&edges, b);
    let selected = excess_of_mass(&edges, &stability, b, cfg.allow_single_cluster);
    let labels = label_points(&edges, &selected, b);
    let assignment = ClusterAssignment::from_labels(labels);
    Ok((
        assignment,
        Some(CondensedTree {
            num_points: b,
            edges,
            stability,
            selected,
        }),
    ))
}

/// Adjusted Rand index between two labelings; every distinct value
/// (including a noise code) is its own class.
pub fn adjusted_rand_index<A, B>(a: &[A], b: &[B]) -> f64
where
    A: std::hash::Hash + Eq,
    B: std::hash::Hash + Eq,
{
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let mut ia: HashMap<&A, usize> = HashMap::new();
    let mut ib: HashMap<&B, usize> = HashMap::new();
    let ka: Vec<usize> = a.iter().map(|x| { let k = ia.len(); *ia.entry(x).or_insert(k) }).collect();
    let kb: Vec<usize> = b.iter().map(|x| { let k = ib.len(); *ib.entry(x).or_insert(k) }).collect();
    let mut table = vec![vec![0u64; ib.len()]; ia.len()];
    for (x, y) in ka.iter().zip(&kb) {
        table[*x][*y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let sum_cells: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..ib.len()).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (sum_cells - expected) / (max - expected)
}
