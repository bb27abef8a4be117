//! Prototypes, distances and the episodic classification loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, RelationalStructure};
use crate::models::{pgnn_forward, PgnnParams};
use crate::tensor::{kernels, Tape, Tensor, TensorId};

/// One few-shot task: a support/query split of one graph's labeled nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub graph_id: usize,
    classes: Vec<ClassSplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    /// Validates that every class has support nodes, that support and query
    /// sets are disjoint, and that listed nodes carry the class's label.
    pub fn new(graph_id: usize, classes: Vec<ClassSplit>, g: &Graph) -> Result<Self> {
        for (k, split) in classes.iter().enumerate() {
            if split.support.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "class {k} has an empty support set"
                )));
            }
            for &node in split.support.iter().chain(&split.query) {
                if node >= g.n() {
                    return Err(Error::InvalidConfig(format!(
                        "episode node {node} out of bounds for a {}-node graph",
                        g.n()
                    )));
                }
                if g.label(node) != k {
                    return Err(Error::InvalidConfig(format!(
                        "node {node} has label {} but appears under class {k}",
                        g.label(node)
                    )));
                }
            }
            if split.support.iter().any(|s| split.query.contains(s)) {
                return Err(Error::InvalidConfig(format!(
                    "class {k}: support and query sets overlap"
                )));
            }
        }
        Ok(Episode { graph_id, classes })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn support(&self, class: usize) -> &[usize] {
        &self.classes[class].support
    }

    pub fn query(&self, class: usize) -> &[usize] {
        &self.classes[class].query
    }

    /// Query nodes flattened in class order, paired with their class.
    pub fn queries_with_labels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, split) in self.classes.iter().enumerate() {
            for &node in &split.query {
                out.push((node, k));
            }
        }
        out
    }

    pub fn total_support(&self) -> usize {
        self.classes.iter().map(|c| c.support.len()).sum()
    }

    pub fn total_query(&self) -> usize {
        self.classes.iter().map(|c| c.query.len()).sum()
    }
}

/// How pooled prototype rows are reduced to a single vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    Mean,
    Max,
}

impl PoolKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolKind::Mean),
            "max" => Ok(PoolKind::Max),
            other => Err(Error::InvalidConfig(format!(
                "unknown pool '{other}' (expected mean | max)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    /// Negative inner product: larger similarity means smaller distance, so
    /// the softmax over `-d` rewards alignment.
    InnerProduct,
    /// Negative cosine similarity; undefined for zero vectors.
    Cosine,
}

impl DistanceKind {
    pub fn name(&self) -> &'static str {
        match self {
            DistanceKind::InnerProduct => "inner-product",
            DistanceKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inner-product" => Ok(DistanceKind::InnerProduct),
            "cosine" => Ok(DistanceKind::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown distance '{other}' (expected inner-product | cosine)"
            ))),
        }
    }
}

/// One prototype vector per class, stacked `K x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    matrix: Tensor,
}

impl PrototypeSet {
    pub fn from_rows(rows: Vec<Tensor>) -> Self {
        assert!(!rows.is_empty(), "prototype set needs at least one class");
        let refs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                assert_eq!(r.rows(), 1, "prototype rows must be 1 x d");
                r.row(0).to_vec()
            })
            .collect();
        PrototypeSet {
            matrix: Tensor::from_rows(&refs),
        }
    }

    pub fn from_matrix(matrix: Tensor) -> Self {
        PrototypeSet { matrix }
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.matrix.row(class)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

/// Arithmetic mean of the support embedding rows.
pub fn mean_prototype(support_embeddings: &Tensor) -> Tensor {
    assert!(
        support_embeddings.rows() >= 1,
        "mean_prototype of an empty embedding matrix"
    );
    let mut tape = Tape::new();
    let e = tape.constant(support_embeddings.clone());
    let m = tape.mean_pool_rows(e);
    tape.value(m).clone()
}

/// Graph-structured prototype: prototype-GNN over the relational structure,
/// pooled across support rows.
pub fn graph_structured_prototype(
    structure: &RelationalStructure,
    support_embeddings: &Tensor,
    pgnn: &PgnnParams,
    pool: PoolKind,
) -> Tensor {
    let mixed = pgnn_forward(structure, support_embeddings, pgnn);
    let mut tape = Tape::new();
    let m = tape.constant(mixed);
    let pooled = match pool {
        PoolKind::Mean => tape.mean_pool_rows(m),
        PoolKind::Max => tape.max_pool_rows(m),
    };
    tape.value(pooled).clone()
}

/// Distance between an embedding and a prototype.
pub fn distance(a: &[f64], c: &[f64], kind: DistanceKind) -> f64 {
    assert_eq!(
        a.len(),
        c.len(),
        "distance: length mismatch {} vs {}",
        a.len(),
        c.len()
    );
    let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
    match kind {
        DistanceKind::InnerProduct => -dot,
        DistanceKind::Cosine => {
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nc: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(
                na > 0.0 && nc > 0.0,
                "cosine distance is undefined for a zero vector"
            );
            -dot / (na * nc)
        }
    }
}

/// Nearest-prototype class, ties toward the lower class index.
pub fn classify(query_embedding: &[f64], prototypes: &PrototypeSet, kind: DistanceKind) -> usize {
    assert!(
        prototypes.num_classes() > 0,
        "classify with an empty prototype set"
    );
    let mut best = 0;
    let mut best_d = distance(query_embedding, prototypes.prototype(0), kind);
    for k in 1..prototypes.num_classes() {
        let d = distance(query_embedding, prototypes.prototype(k), kind);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Episodic loss: summed negative log-probability of each query's class under
/// the softmax over negative distances. Returns the loss and the per-query
/// probability rows (aligned with `query_labels`).
pub fn episode_loss(
    query_embeddings: &Tensor,
    query_labels: &[usize],
    prototypes: &PrototypeSet,
    kind: DistanceKind,
) -> (f64, Tensor) {
    let q = query_embeddings.rows();
    assert_eq!(
        q,
        query_labels.len(),
        "episode_loss: {q} query rows but {} labels",
        query_labels.len()
    );
    let k = prototypes.num_classes();
    for &label in query_labels {
        assert!(
            label < k,
            "episode_loss: query label {label} has no prototype (K = {k})"
        );
    }

    let mut logits = Tensor::zeros(q, k);
    for i in 0..q {
        for c in 0..k {
            let d = distance(query_embeddings.row(i), prototypes.prototype(c), kind);
            logits.set(i, c, -d);
        }
    }
    let mut probs = vec![0.0; q * k];
    kernels::row_softmax(logits.data(), &mut probs, q, k);
    let probs = Tensor::new(vec![q, k], probs);

    // Loss through log-sum-exp rather than log(prob): stays finite even when
    // a probability underflows to zero.
    let mut loss = 0.0;
    for (i, &label) in query_labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    (loss, probs)
}

/// Logits (`-d`) between query embeddings and prototypes on the tape.
pub fn logits_on_tape(
    tape: &mut Tape,
    query_emb: TensorId,
    prototypes: TensorId,
    kind: DistanceKind,
) -> TensorId {
    let proto_t = tape.transpose(prototypes);
    let inner = tape.matmul(query_emb, proto_t);
    match kind {
        DistanceKind::InnerProduct => inner,
        DistanceKind::Cosine => {
            let inv_q = inverse_row_norms(tape, query_emb);
            let inv_c = inverse_row_norms(tape, prototypes);
            let inv_c_t = tape.transpose(inv_c);
            let scaling = tape.matmul(inv_q, inv_c_t);
            tape.mul(inner, scaling)
        }
    }
}

/// Column of `1 / ||row||` values, differentiably: `exp(-0.5 log(sum x^2))`.
/// Zero rows trip the log-positivity check, matching the cosine contract.
fn inverse_row_norms(tape: &mut Tape, x: TensorId) -> TensorId {
    let d = tape.value(x).cols();
    let squares = tape.mul(x, x);
    let ones = tape.constant(Tensor::filled(d, 1, 1.0));
    let sums = tape.matmul(squares, ones);
    let logs = tape.log(sums);
    let scaled = tape.scale(logs, -0.5);
    tape.exp(scaled)
}

/// Row-wise log-softmax composed from tape primitives, with the usual
/// max-subtraction so the intermediate exponentials cannot overflow and the
/// summed exponentials stay at least 1 (safe to log).
pub fn log_softmax_on_tape(tape: &mut Tape, logits: TensorId) -> TensorId {
    let k = tape.value(logits).cols();
    let logits_t = tape.transpose(logits);
    let max_row = tape.max_pool_rows(logits_t);
    let max_col = tape.transpose(max_row);
    let ones_row = tape.constant(Tensor::filled(1, k, 1.0));
    let max_mat = tape.matmul(max_col, ones_row);
    let shifted = tape.sub(logits, max_mat);
    let exps = tape.exp(shifted);
    let ones_col = tape.constant(Tensor::filled(k, 1, 1.0));
    let sums = tape.matmul(exps, ones_col);
    let lse = tape.log(sums);
    let lse_mat = tape.matmul(lse, ones_row);
    tape.sub(shifted, lse_mat)
}

/// Episodic loss on the tape. Returns `(loss, probabilities)`.
pub fn episode_loss_on_tape(
    tape: &mut Tape,
    query_emb: TensorId,
    query_labels: &[usize],
    prototypes: TensorId,
    kind: DistanceKind,
) -> (TensorId, TensorId) {
    let q = tape.value(query_emb).rows();
    let k = tape.value(prototypes).rows();
    assert_eq!(q, query_labels.len());
    let logits = logits_on_tape(tape, query_emb, prototypes, kind);
    let probs = tape.row_softmax(logits);
    let log_probs = log_softmax_on_tape(tape, logits);
    let mask = {
        let mut m = Tensor::zeros(q, k);
        for (i, &label) in query_labels.iter().enumerate() {
            m.set(i, label, 1.0);
        }
        tape.constant(m)
    };
    let picked = tape.mul(mask, log_probs);
    let total = tape.sum(picked);
    let loss = tape.scale(total, -1.0);
    (loss, probs)
}
