//! Graph data model, adjacency normalization, node-pair similarity and the
//! relational structures built from a class's support nodes, plus the
//! label-propagation baseline.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid;
use crate::tensor::Tensor;

/// An undirected, unweighted graph with node features and class labels.
///
/// The adjacency matrix is symmetric with `{0,1}` entries and a zero
/// diagonal; features have one row per node and labels one entry per node.
/// Neighbor lists and per-class node lists are precomputed at construction —
/// episode sampling and similarity scoring hit them constantly.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: Tensor,
    features: Tensor,
    labels: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    class_nodes: Vec<Vec<usize>>,
}

impl Graph {
    pub fn new(adjacency: Tensor, features: Tensor, labels: Vec<usize>) -> Result<Self> {
        let n = adjacency.rows();
        if adjacency.cols() != n {
            return Err(Error::InvalidGraph(format!(
                "adjacency must be square, got {}x{}",
                n,
                adjacency.cols()
            )));
        }
        for i in 0..n {
            if adjacency.at(i, i) != 0.0 {
                return Err(Error::InvalidGraph(format!("nonzero diagonal at node {i}")));
            }
            for j in 0..n {
                let a = adjacency.at(i, j);
                if a != 0.0 && a != 1.0 {
                    return Err(Error::InvalidGraph(format!(
                        "entry ({i},{j}) = {a} is not in {{0,1}}"
                    )));
                }
                if a != adjacency.at(j, i) {
                    return Err(Error::InvalidGraph(format!(
                        "adjacency not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        if features.rows() != n {
            return Err(Error::InvalidGraph(format!(
                "feature rows {} != node count {n}",
                features.rows()
            )));
        }
        if labels.len() != n {
            return Err(Error::InvalidGraph(format!(
                "label count {} != node count {n}",
                labels.len()
            )));
        }
        if !features.all_finite() {
            return Err(Error::InvalidGraph("non-finite feature value".into()));
        }

        let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut class_nodes = vec![Vec::new(); num_classes];
        for (node, &label) in labels.iter().enumerate() {
            class_nodes[label].push(node);
        }
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| adjacency.at(i, j) != 0.0).collect())
            .collect();

        Ok(Graph {
            adjacency,
            features,
            labels,
            neighbors,
            class_nodes,
        })
    }

    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize)],
        features: Tensor,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let mut adj = Tensor::zeros(n, n);
        for &(u, v) in edges {
            if u >= n || v >= n || u == v {
                return Err(Error::InvalidGraph(format!("bad edge ({u},{v}) for n={n}")));
            }
            adj.set(u, v, 1.0);
            adj.set(v, u, 1.0);
        }
        Graph::new(adj, features, labels)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_nodes.len()
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> usize {
        self.labels[node]
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn class_nodes(&self, class: usize) -> &[usize] {
        &self.class_nodes[class]
    }

    /// Undirected edge list with `u < v`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.n() {
            for &v in &self.neighbors[u] {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(|l| l.len()).sum::<usize>() / 2
    }

    /// Nodes within `hops` steps of `node`, excluding `node` itself.
    pub fn khop_neighborhood(&self, node: usize, hops: usize) -> HashSet<usize> {
        let mut seen = HashSet::new();
        seen.insert(node);
        let mut frontier = vec![node];
        for _ in 0..hops {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in &self.neighbors[u] {
                    if seen.insert(v) {
                        next.push(v);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        seen.remove(&node);
        seen
    }

    /// Connected components as a node -> component-id map.
    pub fn components(&self) -> Vec<usize> {
        let n = self.n();
        let mut comp = vec![usize::MAX; n];
        let mut next_id = 0;
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = next_id;
            while let Some(u) = stack.pop() {
                for &v in &self.neighbors[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next_id;
                        stack.push(v);
                    }
                }
            }
            next_id += 1;
        }
        comp
    }
}

/// Symmetric-normalized propagation matrix with self-loops:
/// `D^{-1/2} (A + I) D^{-1/2}` where `D` is the degree of `A + I`.
///
/// The result equals its transpose exactly (the two scale factors commute),
/// and an isolated node's row holds a single `1.0` self-loop entry.
pub fn normalize_adjacency(g: &Graph) -> Tensor {
    let n = g.n();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((g.degree(i) + 1) as f64).sqrt())
        .collect();
    Tensor::from_fn(n, n, |i, j| {
        let a = if i == j { 1.0 } else { g.adjacency().at(i, j) };
        a * inv_sqrt[i] * inv_sqrt[j]
    })
}

/// Same normalization for a weighted square matrix whose diagonal already
/// carries the self-loop mass (relational structures, pooled adjacencies).
pub fn normalize_weighted(w: &Tensor) -> Tensor {
    let n = w.rows();
    assert_eq!(n, w.cols(), "normalize_weighted: matrix must be square");
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let row_sum: f64 = (0..n).map(|j| w.at(i, j)).sum();
            assert!(
                row_sum > 0.0,
                "normalize_weighted: row {i} has non-positive mass"
            );
            1.0 / row_sum.sqrt()
        })
        .collect();
    Tensor::from_fn(n, n, |i, j| w.at(i, j) * inv_sqrt[i] * inv_sqrt[j])
}

/// Node-pair similarity functions used to build relational structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMethod {
    /// Sigmoid of the number of common k-hop neighbors.
    TopKCommonNeighbors,
    /// Jaccard index of the 1-hop neighborhoods.
    Jaccard,
    /// Sigmoid of the Adamic-Adar index over common 1-hop neighbors.
    AdamicAdar,
    /// Sigmoid of the symmetrized personalized-PageRank score.
    Pagerank,
}

impl SimilarityMethod {
    pub const ALL: [SimilarityMethod; 4] = [
        SimilarityMethod::TopKCommonNeighbors,
        SimilarityMethod::Jaccard,
        SimilarityMethod::AdamicAdar,
        SimilarityMethod::Pagerank,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SimilarityMethod::TopKCommonNeighbors => "top-k-cn",
            SimilarityMethod::Jaccard => "jaccard",
            SimilarityMethod::AdamicAdar => "adamic-adar",
            SimilarityMethod::Pagerank => "pagerank",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "top-k-cn" => Ok(SimilarityMethod::TopKCommonNeighbors),
            "jaccard" => Ok(SimilarityMethod::Jaccard),
            "adamic-adar" => Ok(SimilarityMethod::AdamicAdar),
            "pagerank" => Ok(SimilarityMethod::Pagerank),
            other => Err(Error::InvalidConfig(format!(
                "unknown similarity method '{other}' (expected top-k-cn | jaccard | adamic-adar | pagerank)"
            ))),
        }
    }
}

/// Configuration of similarity scoring and relational-structure construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub method: SimilarityMethod,
    /// Neighborhood radius for the common-neighbor count.
    pub hop_k: usize,
    /// Each support node keeps at most this many accepted partners.
    pub top_k: usize,
    /// Acceptance threshold: scores below it are floored.
    pub mu: f64,
    /// Floor value assigned to rejected pairs. Must satisfy `mu0 < mu`.
    pub mu0: f64,
}

impl SimilarityConfig {
    pub fn new(
        method: SimilarityMethod,
        hop_k: usize,
        top_k: usize,
        mu: f64,
        mu0: f64,
    ) -> Result<Self> {
        if hop_k < 1 {
            return Err(Error::InvalidConfig("hop_k must be at least 1".into()));
        }
        if top_k < 1 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        if mu0 >= mu {
            return Err(Error::InvalidConfig(format!(
                "mu0 must be strictly below mu (got mu0={mu0}, mu={mu})"
            )));
        }
        Ok(SimilarityConfig {
            method,
            hop_k,
            top_k,
            mu,
            mu0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.method, self.hop_k, self.top_k, self.mu, self.mu0).map(|_| ())
    }
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            method: SimilarityMethod::TopKCommonNeighbors,
            hop_k: 3,
            top_k: 3,
            mu: 0.5,
            mu0: 0.1,
        }
    }
}

/// Similarity score for a pair of distinct nodes. All methods are symmetric
/// in `(u, v)`; the sigmoid-smoothed ones land strictly inside `(0, 1)`,
/// Jaccard inside `[0, 1]`.
pub fn similarity(g: &Graph, u: usize, v: usize, cfg: &SimilarityConfig) -> f64 {
    assert!(
        u != v,
        "similarity: self-similarity of node {u} is fixed by the structure builder"
    );
    assert!(
        u < g.n() && v < g.n(),
        "similarity: node index out of bounds"
    );
    match cfg.method {
        SimilarityMethod::TopKCommonNeighbors => {
            let nu = g.khop_neighborhood(u, cfg.hop_k);
            let nv = g.khop_neighborhood(v, cfg.hop_k);
            topk_cn_score(&nu, &nv, u, v)
        }
        SimilarityMethod::Jaccard => jaccard_score(g, u, v),
        SimilarityMethod::AdamicAdar => adamic_adar_score(g, u, v),
        SimilarityMethod::Pagerank => {
            let fwd = personalized_pagerank(g, u)[v];
            let bwd = personalized_pagerank(g, v)[u];
            sigmoid(0.5 * (fwd + bwd))
        }
    }
}

fn topk_cn_score(nu: &HashSet<usize>, nv: &HashSet<usize>, u: usize, v: usize) -> f64 {
    // The neighborhoods exclude their own centers; exclude the partner too,
    // otherwise adjacent pairs would count each other.
    let common = nu
        .iter()
        .filter(|&&w| w != v && w != u && nv.contains(&w))
        .count();
    sigmoid(common as f64)
}

fn jaccard_score(g: &Graph, u: usize, v: usize) -> f64 {
    let nu: HashSet<usize> = g.neighbors(u).iter().copied().collect();
    let nv: HashSet<usize> = g.neighbors(v).iter().copied().collect();
    let union = nu.union(&nv).count();
    if union == 0 {
        return 0.0;
    }
    nu.intersection(&nv).count() as f64 / union as f64
}

fn adamic_adar_score(g: &Graph, u: usize, v: usize) -> f64 {
    // Common 1-hop neighbors have degree >= 2, so ln(deg) > 0. Ascending
    // node order keeps the sum deterministic bit-for-bit.
    let nv: HashSet<usize> = g.neighbors(v).iter().copied().collect();
    let score: f64 = g
        .neighbors(u)
        .iter()
        .filter(|w| nv.contains(w))
        .map(|&w| 1.0 / (g.degree(w) as f64).ln())
        .sum();
    sigmoid(score)
}

/// All pairwise similarities of a node list, sharing per-node neighborhood
/// and PageRank computations. Scores are bit-identical to calling
/// [`similarity`] pair by pair.
fn pairwise_similarities(g: &Graph, nodes: &[usize], cfg: &SimilarityConfig) -> Tensor {
    let m = nodes.len();
    let mut scores = Tensor::zeros(m, m);
    match cfg.method {
        SimilarityMethod::TopKCommonNeighbors => {
            let hoods: Vec<HashSet<usize>> = nodes
                .iter()
                .map(|&u| g.khop_neighborhood(u, cfg.hop_k))
                .collect();
            for i in 0..m {
                for j in (i + 1)..m {
                    let s = topk_cn_score(&hoods[i], &hoods[j], nodes[i], nodes[j]);
                    scores.set(i, j, s);
                    scores.set(j, i, s);
                }
            }
        }
        SimilarityMethod::Pagerank => {
            let ppr: Vec<Vec<f64>> = nodes.iter().map(|&u| personalized_pagerank(g, u)).collect();
            for i in 0..m {
                for j in (i + 1)..m {
                    let s = sigmoid(0.5 * (ppr[i][nodes[j]] + ppr[j][nodes[i]]));
                    scores.set(i, j, s);
                    scores.set(j, i, s);
                }
            }
        }
        SimilarityMethod::Jaccard | SimilarityMethod::AdamicAdar => {
            for i in 0..m {
                for j in (i + 1)..m {
                    let s = similarity(g, nodes[i], nodes[j], cfg);
                    scores.set(i, j, s);
                    scores.set(j, i, s);
                }
            }
        }
    }
    scores
}

const PAGERANK_DAMPING: f64 = 0.85;
const PAGERANK_TOL: f64 = 1e-8;
const PAGERANK_MAX_ITERS: usize = 1000;

/// Personalized PageRank with teleport to `source`. Mass on zero-degree nodes
/// is returned to the source, so the vector stays a distribution.
pub fn personalized_pagerank(g: &Graph, source: usize) -> Vec<f64> {
    let n = g.n();
    let mut x = vec![0.0; n];
    x[source] = 1.0;
    for _ in 0..PAGERANK_MAX_ITERS {
        let mut next = vec![0.0; n];
        let mut dangling = 0.0;
        for u in 0..n {
            let deg = g.degree(u);
            if deg == 0 {
                dangling += x[u];
                continue;
            }
            let share = x[u] / deg as f64;
            for &v in g.neighbors(u) {
                next[v] += share;
            }
        }
        for v in next.iter_mut() {
            *v *= PAGERANK_DAMPING;
        }
        next[source] += 1.0 - PAGERANK_DAMPING + PAGERANK_DAMPING * dangling;
        let delta = x
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = next;
        if delta < PAGERANK_TOL {
            break;
        }
    }
    x
}

/// Weighted similarity graph over the support nodes of one class.
///
/// `weights` is symmetric with unit diagonal; every off-diagonal entry is
/// either an accepted similarity (>= the threshold) or the floor value.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalStructure {
    pub node_ids: Vec<usize>,
    pub weights: Tensor,
}

impl RelationalStructure {
    pub fn size(&self) -> usize {
        self.node_ids.len()
    }
}

/// Builds the relational structure of a support set.
///
/// Pairwise scores are computed with `cfg.method`; each node keeps its
/// `cfg.top_k` best-scoring accepted partners (ties broken toward the lower
/// partner position) and the kept set is symmetrized by union. Every pair
/// that is rejected — below `mu` or outside both nodes' top-k — gets the
/// floor `mu0`. The diagonal is fixed to 1.
pub fn build_relational_structure(
    g: &Graph,
    support_nodes: &[usize],
    cfg: &SimilarityConfig,
) -> RelationalStructure {
    assert!(
        !support_nodes.is_empty(),
        "relational structure needs a nonempty support set"
    );
    let m = support_nodes.len();
    {
        let mut sorted = support_nodes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), m, "support nodes must be distinct");
    }

    if m == 1 {
        return RelationalStructure {
            node_ids: support_nodes.to_vec(),
            weights: Tensor::filled(1, 1, 1.0),
        };
    }

    let scores = pairwise_similarities(g, support_nodes, cfg);

    // Per-node top-k among accepted partners, ordered by score descending
    // then partner position ascending.
    let mut kept = vec![vec![false; m]; m];
    for i in 0..m {
        let mut partners: Vec<usize> = (0..m)
            .filter(|&j| j != i && scores.at(i, j) >= cfg.mu)
            .collect();
        partners.sort_by(|&a, &b| {
            scores
                .at(i, b)
                .partial_cmp(&scores.at(i, a))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in partners.iter().take(cfg.top_k) {
            kept[i][j] = true;
        }
    }

    let weights = Tensor::from_fn(m, m, |i, j| {
        if i == j {
            1.0
        } else if kept[i][j] || kept[j][i] {
            scores.at(i, j)
        } else {
            cfg.mu0
        }
    });

    RelationalStructure {
        node_ids: support_nodes.to_vec(),
        weights,
    }
}

/// Result of label propagation. `uncovered_nodes` lists nodes living in
/// connected components without any labeled node; those default to class 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPropOutcome {
    pub predicted: Vec<usize>,
    pub uncovered_nodes: Vec<usize>,
    pub iterations: usize,
}

/// Semi-supervised label propagation: iterate `Y <- normalized_adjacency * Y`
/// with labeled rows clamped to their one-hot vectors, then predict the
/// arg-max class per row (ties toward the lower class index).
///
/// Callers should provide at least one labeled node per class; classes with
/// no labeled seed can never be predicted.
pub fn label_propagation(
    g: &Graph,
    labeled: &[(usize, usize)],
    max_iters: usize,
    tol: f64,
) -> LabelPropOutcome {
    let n = g.n();
    let k = g
        .num_classes()
        .max(labeled.iter().map(|&(_, c)| c + 1).max().unwrap_or(1));
    let a_hat = normalize_adjacency(g);

    let mut y = Tensor::zeros(n, k);
    let mut clamped = vec![None; n];
    for &(node, class) in labeled {
        assert!(
            node < n && class < k,
            "label propagation: bad labeled pair ({node},{class})"
        );
        clamped[node] = Some(class);
        y.set(node, class, 1.0);
    }

    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut next = a_hat.matmul(&y);
        for (node, c) in clamped.iter().enumerate() {
            if let Some(class) = c {
                for j in 0..k {
                    next.set(node, j, if j == *class { 1.0 } else { 0.0 });
                }
            }
        }
        let delta = y
            .data()
            .iter()
            .zip(next.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        y = next;
        if delta < tol {
            break;
        }
    }

    let predicted = (0..n)
        .map(|i| {
            let row = y.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();

    // Components with no labeled node never receive mass; flag them.
    let comp = g.components();
    let mut covered: HashSet<usize> = HashSet::new();
    for &(node, _) in labeled {
        covered.insert(comp[node]);
    }
    let uncovered_nodes = (0..n).filter(|&i| !covered.contains(&comp[i])).collect();

    LabelPropOutcome {
        predicted,
        uncovered_nodes,
        iterations,
    }
}
