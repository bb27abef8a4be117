//! Hierarchical graph representation and the parameter gate.
//!
//! A graph is summarized at `R` levels: level 1 pools a fused view of the
//! raw nodes; each coarser level soft-assigns nodes into communities
//! (assignment GNN + row softmax), pools the adjacency through the assignment
//! matrix and fuses features (fusion GNN). The per-level vectors are
//! aggregated (mean or attention) into one graph vector, which a sigmoid gate
//! maps onto the prototype GNN's parameter space to produce graph-specific
//! prototype weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, normalize_weighted, Graph};
use crate::models::{gcn_layer_on_tape, Activation, GcnLayer, LayerIds, PgnnParams, EMBED_DIM};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    Mean,
    Attention,
}

impl Aggregator {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregator::Mean),
            "attention" => Ok(Aggregator::Attention),
            other => Err(Error::InvalidConfig(format!(
                "unknown aggregator '{other}' (expected mean | attention)"
            ))),
        }
    }
}

/// Shape of the hierarchy: number of levels and community counts per
/// coarsening step. `levels == 1` is the flat configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub levels: usize,
    pub community_counts: Vec<usize>,
    pub aggregator: Aggregator,
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::InvalidConfig(
                "hierarchy must have at least one level".into(),
            ));
        }
        if self.community_counts.len() != self.levels - 1 {
            return Err(Error::InvalidConfig(format!(
                "hierarchy with {} levels needs {} community counts, got {}",
                self.levels,
                self.levels - 1,
                self.community_counts.len()
            )));
        }
        if self.community_counts.contains(&0) {
            return Err(Error::InvalidConfig(
                "community counts must be positive".into(),
            ));
        }
        if self.community_counts.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidConfig(
                "community counts must be non-increasing across levels".into(),
            ));
        }
        Ok(())
    }
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            levels: 3,
            community_counts: vec![8, 2],
            aggregator: Aggregator::Mean,
        }
    }
}

/// Assignment + fusion pair for one coarsening step.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    pub agnn: GcnLayer,
    pub fgnn: GcnLayer,
}

/// All hierarchy parameters. `level1_fgnn` produces the level-1 representation
/// (which exists even in the flat configuration); `levels[r]` drives the
/// coarsening from level `r+1` to `r+2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyParams {
    pub level1_fgnn: GcnLayer,
    pub levels: Vec<LevelParams>,
}

impl HierarchyParams {
    pub fn init(input_dim: usize, cfg: &HierarchyConfig, rng: &mut Rng) -> Self {
        let level1_fgnn = GcnLayer::init(input_dim, EMBED_DIM, Activation::Relu, rng);
        let mut levels = Vec::new();
        let mut d_in = input_dim;
        for &communities in &cfg.community_counts {
            levels.push(LevelParams {
                agnn: GcnLayer::init(d_in, communities, Activation::None, rng),
                fgnn: GcnLayer::init(d_in, EMBED_DIM, Activation::Relu, rng),
            });
            d_in = EMBED_DIM;
        }
        HierarchyParams {
            level1_fgnn,
            levels,
        }
    }
}

/// Gate parameters: a linear map from the graph vector onto the flattened
/// prototype-GNN parameter space, plus the attention query vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// `P x d_h` where `P` is the prototype-GNN parameter count.
    pub w_g: Tensor,
    /// `P x 1`.
    pub b_g: Tensor,
    /// Attention query, `d_h x 1`. Shared across graphs so the aggregator
    /// transfers to unseen graphs.
    pub query: Tensor,
}

impl GateParams {
    pub fn init(pgnn_param_count: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (pgnn_param_count + EMBED_DIM) as f64).sqrt();
        let w_g = Tensor::from_fn(pgnn_param_count, EMBED_DIM, |_, _| {
            rng.uniform(-bound, bound)
        });
        let b_g = Tensor::zeros(pgnn_param_count, 1);
        let qb = (6.0 / (EMBED_DIM + 1) as f64).sqrt();
        let query = Tensor::from_fn(EMBED_DIM, 1, |_, _| rng.uniform(-qb, qb));
        GateParams { w_g, b_g, query }
    }
}

/// Tape-side hierarchy handles.
#[derive(Debug, Clone)]
pub struct HierarchyIds {
    pub level1_fgnn: LayerIds,
    pub levels: Vec<LevelIds>,
}

#[derive(Debug, Clone, Copy)]
pub struct LevelIds {
    pub agnn: LayerIds,
    pub fgnn: LayerIds,
}

/// Differentiable symmetric normalization of a weighted adjacency:
/// `(A + I) ∘ (r r^T)` with `r = rowsum(A + I)^{-1/2}`. Entries of `A` must
/// be non-negative so the row sums stay positive.
pub fn normalize_on_tape(tape: &mut Tape, a_raw: TensorId) -> TensorId {
    let n = tape.value(a_raw).rows();
    let eye = tape.constant(Tensor::identity(n));
    let with_loops = tape.add(a_raw, eye);
    let ones = tape.constant(Tensor::filled(n, 1, 1.0));
    let row_sums = tape.matmul(with_loops, ones);
    let log_sums = tape.log(row_sums);
    let neg_half = tape.scale(log_sums, -0.5);
    let inv_sqrt = tape.exp(neg_half);
    let inv_sqrt_t = tape.transpose(inv_sqrt);
    let scaling = tape.matmul(inv_sqrt, inv_sqrt_t);
    tape.mul(with_loops, scaling)
}

/// Soft assignment of level-`r` nodes into communities: row softmax of the
/// assignment GNN's output under the level's propagation matrix.
pub fn assign_on_tape(
    tape: &mut Tape,
    propagation: TensorId,
    x: TensorId,
    agnn: LayerIds,
) -> TensorId {
    let logits = gcn_layer_on_tape(tape, propagation, x, agnn);
    tape.row_softmax(logits)
}

/// One coarsening step. Returns the pooled raw adjacency `P^T A P`, the
/// pooled features `P^T FGNN(A, X)` and the level vector (their row mean).
pub fn fuse_on_tape(
    tape: &mut Tape,
    a_raw: TensorId,
    propagation: TensorId,
    x: TensorId,
    assignment: TensorId,
    fgnn: LayerIds,
) -> (TensorId, TensorId, TensorId) {
    let fused = gcn_layer_on_tape(tape, propagation, x, fgnn);
    let p_t = tape.transpose(assignment);
    let x_next = tape.matmul(p_t, fused);
    let pooled = tape.matmul(p_t, a_raw);
    let a_next = tape.matmul(pooled, assignment);
    let h_next = tape.mean_pool_rows(x_next);
    (a_next, x_next, h_next)
}

/// All level vectors `h^1 .. h^R` for a graph, starting from `(a_raw, x)`
/// tape constants. Level 1 pools the dedicated fusion layer's output; deeper
/// levels alternate assignment and fusion. Pooled adjacencies keep the `+I`
/// self-loop when renormalized, mirroring level 1.
pub fn hierarchy_levels_on_tape(
    tape: &mut Tape,
    a_raw: TensorId,
    propagation: TensorId,
    x: TensorId,
    ids: &HierarchyIds,
) -> Vec<TensorId> {
    let fused1 = gcn_layer_on_tape(tape, propagation, x, ids.level1_fgnn);
    let mut levels = vec![tape.mean_pool_rows(fused1)];

    let mut a = a_raw;
    let mut prop = propagation;
    let mut feats = x;
    for level in &ids.levels {
        let p = assign_on_tape(tape, prop, feats, level.agnn);
        let (a_next, x_next, h_next) = fuse_on_tape(tape, a, prop, feats, p, level.fgnn);
        levels.push(h_next);
        a = a_next;
        feats = x_next;
        prop = normalize_on_tape(tape, a);
    }
    levels
}

/// Aggregates level vectors into one graph vector. Mean averages them;
/// attention softmax-normalizes the query scores `q^T h^r` into weights beta.
/// Returns the graph vector and, for attention, the `1 x R` weight row.
pub fn aggregate_on_tape(
    tape: &mut Tape,
    levels: &[TensorId],
    aggregator: Aggregator,
    query: TensorId,
) -> (TensorId, Option<TensorId>) {
    assert!(!levels.is_empty(), "aggregate: no level vectors");
    match aggregator {
        Aggregator::Mean => {
            let mut acc = levels[0];
            for &h in &levels[1..] {
                acc = tape.add(acc, h);
            }
            (tape.scale(acc, 1.0 / levels.len() as f64), None)
        }
        Aggregator::Attention => {
            let stacked = tape.concat_rows(levels);
            let scores = tape.matmul(stacked, query);
            let scores_row = tape.transpose(scores);
            let beta = tape.row_softmax(scores_row);
            let h = tape.matmul(beta, stacked);
            (h, Some(beta))
        }
    }
}

/// Gate modulation: `g = sigmoid(W_g h + b_g)` elementwise-scales the
/// flattened prototype weights. Returns the modulated `d x d` weight and the
/// gate vector itself.
pub fn gate_on_tape(
    tape: &mut Tape,
    graph_vec: TensorId,
    w_g: TensorId,
    b_g: TensorId,
    phi: TensorId,
) -> (TensorId, TensorId) {
    let (rows, cols) = (tape.value(phi).rows(), tape.value(phi).cols());
    let p = rows * cols;
    assert_eq!(
        tape.value(w_g).rows(),
        p,
        "gate: W_g has {} rows for {} prototype parameters",
        tape.value(w_g).rows(),
        p
    );
    let h_col = tape.transpose(graph_vec);
    let projected = tape.matmul(w_g, h_col);
    let pre = tape.add(projected, b_g);
    let gate = tape.sigmoid(pre);
    let phi_flat = tape.reshape(phi, vec![p, 1]);
    let gated_flat = tape.mul(gate, phi_flat);
    let gated = tape.reshape(gated_flat, vec![rows, cols]);
    (gated, gate)
}

// ── Eager wrappers (no gradients) ──────────────────────────────────────

/// Propagation matrix for a weighted level adjacency (adds self-loops).
fn eager_propagation(a_raw: &Tensor) -> Tensor {
    let n = a_raw.rows();
    let mut with_loops = a_raw.clone();
    for i in 0..n {
        with_loops.set(i, i, with_loops.at(i, i) + 1.0);
    }
    normalize_weighted(&with_loops)
}

/// Assignment matrix for one level of a (possibly weighted) adjacency.
pub fn assign(a_raw: &Tensor, x: &Tensor, agnn: &GcnLayer) -> Tensor {
    let mut tape = Tape::new();
    let prop = tape.constant(eager_propagation(a_raw));
    let x_id = tape.constant(x.clone());
    let layer = LayerIds {
        weight: tape.constant(agnn.weight.clone()),
        activation: agnn.activation,
    };
    let p = assign_on_tape(&mut tape, prop, x_id, layer);
    tape.value(p).clone()
}

/// One eager coarsening step given an assignment matrix.
pub fn fuse(
    a_raw: &Tensor,
    x: &Tensor,
    assignment: &Tensor,
    fgnn: &GcnLayer,
) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::new();
    let a_id = tape.constant(a_raw.clone());
    let prop = tape.constant(eager_propagation(a_raw));
    let x_id = tape.constant(x.clone());
    let p_id = tape.constant(assignment.clone());
    let layer = LayerIds {
        weight: tape.constant(fgnn.weight.clone()),
        activation: fgnn.activation,
    };
    let (a_next, x_next, h_next) = fuse_on_tape(&mut tape, a_id, prop, x_id, p_id, layer);
    (
        tape.value(a_next).clone(),
        tape.value(x_next).clone(),
        tape.value(h_next).clone(),
    )
}

/// All level vectors for a graph (no gradients). `inputs` selects the level-1
/// feature matrix: the raw node features by default, or precomputed
/// embeddings.
pub fn hierarchical_representation(
    g: &Graph,
    params: &HierarchyParams,
    x1: &Tensor,
) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let a_raw = tape.constant(g.adjacency().clone());
    let prop = tape.constant(normalize_adjacency(g));
    let x = tape.constant(x1.clone());
    let ids = register_hierarchy(&mut tape, params);
    let levels = hierarchy_levels_on_tape(&mut tape, a_raw, prop, x, &ids);
    levels
        .into_iter()
        .map(|id| tape.value(id).clone())
        .collect()
}

fn register_hierarchy(tape: &mut Tape, params: &HierarchyParams) -> HierarchyIds {
    HierarchyIds {
        level1_fgnn: LayerIds {
            weight: tape.constant(params.level1_fgnn.weight.clone()),
            activation: params.level1_fgnn.activation,
        },
        levels: params
            .levels
            .iter()
            .map(|l| LevelIds {
                agnn: LayerIds {
                    weight: tape.constant(l.agnn.weight.clone()),
                    activation: l.agnn.activation,
                },
                fgnn: LayerIds {
                    weight: tape.constant(l.fgnn.weight.clone()),
                    activation: l.fgnn.activation,
                },
            })
            .collect(),
    }
}

/// Eager aggregation; returns the graph vector and attention weights if any.
pub fn aggregate(
    levels: &[Tensor],
    aggregator: Aggregator,
    query: &Tensor,
) -> (Tensor, Option<Tensor>) {
    assert!(!levels.is_empty(), "aggregate: no level vectors");
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = levels.iter().map(|h| tape.constant(h.clone())).collect();
    let q = tape.constant(query.clone());
    let (h, beta) = aggregate_on_tape(&mut tape, &ids, aggregator, q);
    (tape.value(h).clone(), beta.map(|b| tape.value(b).clone()))
}

/// Eager gate modulation of prototype parameters.
pub fn gate_modulate(graph_vec: &Tensor, gate: &GateParams, phi: &PgnnParams) -> PgnnParams {
    let mut tape = Tape::new();
    let h = tape.constant(graph_vec.clone());
    let w_g = tape.constant(gate.w_g.clone());
    let b_g = tape.constant(gate.b_g.clone());
    let phi_id = tape.constant(phi.layer.weight.clone());
    let (gated, _) = gate_on_tape(&mut tape, h, w_g, b_g, phi_id);
    PgnnParams {
        layer: GcnLayer::new(tape.value(gated).clone(), phi.layer.activation),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_graph(n: usize, h: usize, p: f64, seed: u64) -> Graph {
        let mut rng = Rng::new(seed);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.bernoulli(p) {
                    edges.push((u, v));
                }
            }
        }
        let features = Tensor::from_fn(n, h, |_, _| rng.uniform(-1.0, 1.0));
        Graph::from_edges(n, &edges, features, vec![0; n]).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(HierarchyConfig::default().validate().is_ok());
        let bad = HierarchyConfig {
            levels: 0,
            community_counts: vec![],
            aggregator: Aggregator::Mean,
        };
        assert!(bad.validate().is_err());
        let bad = HierarchyConfig {
            levels: 3,
            community_counts: vec![2, 8],
            aggregator: Aggregator::Mean,
        };
        assert!(bad.validate().is_err());
        let bad = HierarchyConfig {
            levels: 3,
            community_counts: vec![8],
            aggregator: Aggregator::Mean,
        };
        assert!(bad.validate().is_err());
        let flat = HierarchyConfig {
            levels: 1,
            community_counts: vec![],
            aggregator: Aggregator::Mean,
        };
        assert!(flat.validate().is_ok());
    }

    #[test]
    fn zero_agnn_weights_give_uniform_assignments() {
        let g = seeded_graph(6, 4, 0.4, 1);
        let agnn = GcnLayer::new(Tensor::zeros(4, 3), Activation::None);
        let p = assign(g.adjacency(), g.features(), &agnn);
        assert_eq!(p.shape(), &[6, 3]);
        for &v in p.data() {
            assert_eq!(v, 1.0 / 3.0);
        }
    }

    #[test]
    fn single_community_assignment_is_all_ones() {
        let g = seeded_graph(5, 3, 0.4, 2);
        let mut rng = Rng::new(3);
        let agnn = GcnLayer::init(3, 1, Activation::None, &mut rng);
        let p = assign(g.adjacency(), g.features(), &agnn);
        assert_eq!(p.shape(), &[5, 1]);
        for &v in p.data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn assignment_rows_are_distributions() {
        let g = seeded_graph(9, 4, 0.35, 4);
        let mut rng = Rng::new(5);
        let agnn = GcnLayer::init(4, 4, Activation::None, &mut rng);
        let p = assign(g.adjacency(), g.features(), &agnn);
        for i in 0..9 {
            let sum: f64 = p.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(p.row(i).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn assignment_matches_softmax_of_gcn_oracle() {
        // 6 nodes -> 2 communities, checked against naive loops.
        let g = seeded_graph(6, 3, 0.5, 6);
        let mut rng = Rng::new(7);
        let agnn = GcnLayer::init(3, 2, Activation::None, &mut rng);
        let p = assign(g.adjacency(), g.features(), &agnn);

        let n = 6;
        let a_hat = normalize_adjacency(&g);
        let mut logits = vec![vec![0.0; 2]; n];
        for i in 0..n {
            for j in 0..2 {
                let mut acc = 0.0;
                for t in 0..n {
                    let mut mixed = 0.0;
                    for f in 0..3 {
                        mixed += a_hat.at(i, t) * g.features().at(t, f) * agnn.weight.at(f, j);
                    }
                    acc += mixed;
                }
                logits[i][j] = acc;
            }
        }
        for i in 0..n {
            let m = logits[i][0].max(logits[i][1]);
            let e0 = (logits[i][0] - m).exp();
            let e1 = (logits[i][1] - m).exp();
            let z = e0 + e1;
            assert!((p.at(i, 0) - e0 / z).abs() < 1e-12);
            assert!((p.at(i, 1) - e1 / z).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_assignment_preserves_adjacency() {
        let g = seeded_graph(5, 3, 0.5, 8);
        let mut rng = Rng::new(9);
        let fgnn = GcnLayer::init(3, EMBED_DIM, Activation::Relu, &mut rng);
        let p = Tensor::identity(5);
        let (a_next, x_next, _) = fuse(g.adjacency(), g.features(), &p, &fgnn);
        assert_eq!(&a_next, g.adjacency());
        assert_eq!(x_next.shape(), &[5, EMBED_DIM]);
    }

    #[test]
    fn collapsing_assignment_sums_adjacency() {
        let g = seeded_graph(6, 3, 0.5, 10);
        let mut rng = Rng::new(11);
        let fgnn = GcnLayer::init(3, EMBED_DIM, Activation::Relu, &mut rng);
        let p = Tensor::filled(6, 1, 1.0);
        let (a_next, _, _) = fuse(g.adjacency(), g.features(), &p, &fgnn);
        let total: f64 = g.adjacency().data().iter().sum();
        assert_eq!(a_next.shape(), &[1, 1]);
        assert!((a_next.scalar_value() - total).abs() < 1e-12);
    }

    #[test]
    fn fuse_matches_matrix_oracle() {
        let g = seeded_graph(5, 3, 0.5, 12);
        let mut rng = Rng::new(13);
        let fgnn = GcnLayer::init(3, 4, Activation::None, &mut rng);
        let agnn = GcnLayer::init(3, 2, Activation::None, &mut rng);
        let p = assign(g.adjacency(), g.features(), &agnn);
        let (a_next, x_next, h_next) = fuse(g.adjacency(), g.features(), &p, &fgnn);

        let prop = normalize_adjacency(&g);
        let fused = prop.matmul(g.features()).matmul(&fgnn.weight);
        let p_t = p.transpose();
        let x_oracle = p_t.matmul(&fused);
        let a_oracle = p_t.matmul(g.adjacency()).matmul(&p);
        for i in 0..2 {
            for j in 0..2 {
                assert!((a_next.at(i, j) - a_oracle.at(i, j)).abs() < 1e-12);
            }
            for j in 0..4 {
                assert!((x_next.at(i, j) - x_oracle.at(i, j)).abs() < 1e-12);
            }
        }
        for j in 0..4 {
            let mean = (x_oracle.at(0, j) + x_oracle.at(1, j)) / 2.0;
            assert!((h_next.at(0, j) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_adjacency_stays_symmetric() {
        let g = seeded_graph(8, 3, 0.4, 14);
        let mut rng = Rng::new(15);
        let agnn = GcnLayer::init(3, 3, Activation::None, &mut rng);
        let fgnn = GcnLayer::init(3, EMBED_DIM, Activation::Relu, &mut rng);
        let p = assign(g.adjacency(), g.features(), &agnn);
        let (a_next, _, _) = fuse(g.adjacency(), g.features(), &p, &fgnn);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a_next.at(i, j) - a_next.at(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_hierarchy_yields_single_level() {
        let g = seeded_graph(6, 4, 0.4, 16);
        let cfg = HierarchyConfig {
            levels: 1,
            community_counts: vec![],
            aggregator: Aggregator::Mean,
        };
        let mut rng = Rng::new(17);
        let params = HierarchyParams::init(4, &cfg, &mut rng);
        let levels = hierarchical_representation(&g, &params, g.features());
        assert_eq!(levels.len(), 1);
        assert_eq!(levels[0].shape(), &[1, EMBED_DIM]);
    }

    #[test]
    fn identical_isolated_nodes_pool_to_any_row() {
        // No edges, identical features: every fused row is identical and the
        // level vector equals that common row.
        let n = 5;
        let feats = Tensor::from_fn(n, 3, |_, j| (j as f64) + 1.0);
        let g = Graph::from_edges(n, &[], feats, vec![0; n]).unwrap();
        let mut rng = Rng::new(18);
        let params = HierarchyParams::init(
            3,
            &HierarchyConfig {
                levels: 1,
                community_counts: vec![],
                aggregator: Aggregator::Mean,
            },
            &mut rng,
        );
        let levels = hierarchical_representation(&g, &params, g.features());
        let fused_row0 = {
            // act(x W) for one node, since propagation is the identity.
            let w = &params.level1_fgnn.weight;
            let x = g.features();
            (0..EMBED_DIM)
                .map(|j| {
                    (0..3)
                        .map(|k| x.at(0, k) * w.at(k, j))
                        .sum::<f64>()
                        .max(0.0)
                })
                .collect::<Vec<f64>>()
        };
        for j in 0..EMBED_DIM {
            assert!((levels[0].at(0, j) - fused_row0[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn three_level_hierarchy_matches_staged_oracle() {
        let g = seeded_graph(7, 3, 0.5, 19);
        let cfg = HierarchyConfig::default();
        let mut rng = Rng::new(20);
        let params = HierarchyParams::init(3, &cfg, &mut rng);
        let levels = hierarchical_representation(&g, &params, g.features());
        assert_eq!(levels.len(), 3);

        // Stage the same computation through the eager single-step pieces.
        let prop1 = normalize_adjacency(&g);
        let fused1 = prop1
            .matmul(g.features())
            .matmul(&params.level1_fgnn.weight);
        let mut h1 = vec![0.0; EMBED_DIM];
        for j in 0..EMBED_DIM {
            let mut acc = 0.0;
            for i in 0..7 {
                acc += fused1.at(i, j).max(0.0);
            }
            h1[j] = acc / 7.0;
        }
        for j in 0..EMBED_DIM {
            assert!((levels[0].at(0, j) - h1[j]).abs() < 1e-12);
        }

        let p1 = assign(g.adjacency(), g.features(), &params.levels[0].agnn);
        let (a2, x2, h2) = fuse(g.adjacency(), g.features(), &p1, &params.levels[0].fgnn);
        for j in 0..EMBED_DIM {
            assert!((levels[1].at(0, j) - h2.at(0, j)).abs() < 1e-12);
        }

        let p2 = assign(&a2, &x2, &params.levels[1].agnn);
        let (_, _, h3) = fuse(&a2, &x2, &p2, &params.levels[1].fgnn);
        for j in 0..EMBED_DIM {
            assert!((levels[2].at(0, j) - h3.at(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_of_identical_levels_is_that_vector() {
        let mut rng = Rng::new(21);
        let h = Tensor::from_fn(1, EMBED_DIM, |_, _| rng.uniform(-1.0, 1.0));
        let q = Tensor::from_fn(EMBED_DIM, 1, |_, _| rng.uniform(-1.0, 1.0));
        let levels = vec![h.clone(), h.clone(), h.clone()];
        for agg in [Aggregator::Mean, Aggregator::Attention] {
            let (out, _) = aggregate(&levels, agg, &q);
            for j in 0..EMBED_DIM {
                assert!(
                    (out.at(0, j) - h.at(0, j)).abs() < 1e-12,
                    "{} differs at {j}",
                    agg.name()
                );
            }
        }
    }

    #[test]
    fn single_level_attention_weight_is_one() {
        let mut rng = Rng::new(22);
        let h = Tensor::from_fn(1, EMBED_DIM, |_, _| rng.uniform(-1.0, 1.0));
        let q = Tensor::from_fn(EMBED_DIM, 1, |_, _| rng.uniform(-1.0, 1.0));
        let (out, beta) = aggregate(std::slice::from_ref(&h), Aggregator::Attention, &q);
        assert_eq!(out, h);
        assert_eq!(beta.unwrap().data(), &[1.0]);
    }

    #[test]
    fn two_level_attention_matches_weighted_sum_oracle() {
        let mut rng = Rng::new(23);
        let h1 = Tensor::from_fn(1, EMBED_DIM, |_, _| rng.uniform(-1.0, 1.0));
        let h2 = Tensor::from_fn(1, EMBED_DIM, |_, _| rng.uniform(-1.0, 1.0));
        let q = Tensor::from_fn(EMBED_DIM, 1, |_, _| rng.uniform(-1.0, 1.0));
        let (out, beta) = aggregate(&[h1.clone(), h2.clone()], Aggregator::Attention, &q);
        let beta = beta.unwrap();

        let s1: f64 = (0..EMBED_DIM).map(|j| h1.at(0, j) * q.at(j, 0)).sum();
        let s2: f64 = (0..EMBED_DIM).map(|j| h2.at(0, j) * q.at(j, 0)).sum();
        let m = s1.max(s2);
        let (e1, e2) = ((s1 - m).exp(), (s2 - m).exp());
        let (b1, b2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        assert!((beta.at(0, 0) - b1).abs() < 1e-12);
        assert!((beta.at(0, 1) - b2).abs() < 1e-12);
        assert!((beta.at(0, 0) + beta.at(0, 1) - 1.0).abs() <= 1e-12);
        for j in 0..EMBED_DIM {
            let expect = b1 * h1.at(0, j) + b2 * h2.at(0, j);
            assert!((out.at(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gate_parameters_halve_phi() {
        let mut rng = Rng::new(24);
        let phi = PgnnParams::init(&mut rng);
        let p = phi.param_count();
        let gate = GateParams {
            w_g: Tensor::zeros(p, EMBED_DIM),
            b_g: Tensor::zeros(p, 1),
            query: Tensor::zeros(EMBED_DIM, 1),
        };
        let h = Tensor::from_fn(1, EMBED_DIM, |_, _| rng.uniform(-1.0, 1.0));
        let gated = gate_modulate(&h, &gate, &phi);
        for (a, b) in gated
            .layer
            .weight
            .data()
            .iter()
            .zip(phi.layer.weight.data())
        {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn saturated_gate_bias_recovers_phi() {
        let mut rng = Rng::new(25);
        let phi = PgnnParams::init(&mut rng);
        let p = phi.param_count();
        let gate = GateParams {
            w_g: Tensor::zeros(p, EMBED_DIM),
            b_g: Tensor::filled(p, 1, 30.0),
            query: Tensor::zeros(EMBED_DIM, 1),
        };
        let h = Tensor::from_fn(1, EMBED_DIM, |_, _| rng.uniform(-1.0, 1.0));
        let gated = gate_modulate(&h, &gate, &phi);
        let max_phi = phi.layer.weight.max_abs();
        let max_diff = gated
            .layer
            .weight
            .data()
            .iter()
            .zip(phi.layer.weight.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(
            max_diff < 1e-9 * max_phi,
            "residual {max_diff} vs bound {}",
            1e-9 * max_phi
        );
    }

    #[test]
    fn gate_matches_direct_computation() {
        let mut rng = Rng::new(26);
        let phi = PgnnParams::init(&mut rng);
        let p = phi.param_count();
        let gate = GateParams::init(p, &mut rng);
        let h = Tensor::from_fn(1, EMBED_DIM, |_, _| rng.uniform(-1.0, 1.0));
        let gated = gate_modulate(&h, &gate, &phi);

        for i in 0..p {
            let mut pre = gate.b_g.at(i, 0);
            for j in 0..EMBED_DIM {
                pre += gate.w_g.at(i, j) * h.at(0, j);
            }
            let gval = 1.0 / (1.0 + (-pre).exp());
            assert!(gval > 0.0 && gval < 1.0);
            let (r, c) = (i / EMBED_DIM, i % EMBED_DIM);
            let expect = gval * phi.layer.weight.at(r, c);
            assert!((gated.layer.weight.at(r, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn differentiable_normalization_matches_eager() {
        let g = seeded_graph(6, 3, 0.5, 27);
        let mut tape = Tape::new();
        let a = tape.constant(g.adjacency().clone());
        let prop = normalize_on_tape(&mut tape, a);
        let eager = normalize_adjacency(&g);
        for i in 0..6 {
            for j in 0..6 {
                assert!((tape.value(prop).at(i, j) - eager.at(i, j)).abs() < 1e-12);
            }
        }
    }
}
