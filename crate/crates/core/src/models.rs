//! Parameterized networks: the node encoder, the prototype GNN that runs over
//! relational structures, and the reconstruction decoder.
//!
//! Every network is built from single-weight GCN layers: `act((P H) W)` where
//! `P` is a symmetric-normalized propagation matrix with self-loops. Layers
//! carry no bias, matching the message-passing formulation.

use serde::{Deserialize, Serialize};

use crate::graph::{normalize_adjacency, normalize_weighted, Graph, RelationalStructure};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorId};

/// Width of node embeddings, hierarchical representations and prototypes.
pub const EMBED_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    None,
}

/// One graph-convolution layer: a weight matrix and its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weight: Tensor,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new(weight: Tensor, activation: Activation) -> Self {
        assert!(
            weight.all_finite(),
            "layer weight contains non-finite entries"
        );
        GcnLayer { weight, activation }
    }

    /// Fan-based uniform initialization in `±sqrt(6 / (d_in + d_out))`.
    pub fn init(d_in: usize, d_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = Tensor::from_fn(d_in, d_out, |_, _| rng.uniform(-bound, bound));
        GcnLayer { weight, activation }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Tape-side handle for one layer: the registered weight plus its activation.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub weight: TensorId,
    pub activation: Activation,
}

/// `act((P H) W)` on the tape.
pub fn gcn_layer_on_tape(
    tape: &mut Tape,
    propagation: TensorId,
    h: TensorId,
    layer: LayerIds,
) -> TensorId {
    let mixed = tape.matmul(propagation, h);
    let projected = tape.matmul(mixed, layer.weight);
    match layer.activation {
        Activation::Relu => tape.relu(projected),
        Activation::None => projected,
    }
}

/// Two-layer node encoder: `feature_dim -> 32` with relu, `32 -> 32` linear.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: [GcnLayer; 2],
}

impl EncoderParams {
    pub fn init(feature_dim: usize, rng: &mut Rng) -> Self {
        EncoderParams {
            layers: [
                GcnLayer::init(feature_dim, EMBED_DIM, Activation::Relu, rng),
                GcnLayer::init(EMBED_DIM, EMBED_DIM, Activation::None, rng),
            ],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].d_in()
    }
}

/// Prototype GNN: one linear GCN layer over a relational structure. Linear so
/// prototypes live in the same space as the query embeddings they are
/// matched against.
#[derive(Debug, Clone, PartialEq)]
pub struct PgnnParams {
    pub layer: GcnLayer,
}

impl PgnnParams {
    pub fn init(rng: &mut Rng) -> Self {
        PgnnParams {
            layer: GcnLayer::init(EMBED_DIM, EMBED_DIM, Activation::None, rng),
        }
    }

    /// Identity configuration: unit weight, no activation. With an edgeless
    /// structure this makes the prototype path reduce to plain mean pooling.
    pub fn identity() -> Self {
        PgnnParams {
            layer: GcnLayer::new(Tensor::identity(EMBED_DIM), Activation::None),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer.weight.numel()
    }
}

/// Reconstruction decoder: one linear GCN layer; the decoded node matrix `U`
/// scores edges as inner products `U U^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub layer: GcnLayer,
}

impl DecoderParams {
    pub fn init(rng: &mut Rng) -> Self {
        DecoderParams {
            layer: GcnLayer::init(EMBED_DIM, EMBED_DIM, Activation::None, rng),
        }
    }
}

/// Encoder forward on a tape. `a_hat` is the normalized propagation matrix of
/// the graph, `x` the raw feature matrix.
pub fn encode_on_tape(
    tape: &mut Tape,
    a_hat: TensorId,
    x: TensorId,
    layers: &[LayerIds; 2],
) -> TensorId {
    let h = gcn_layer_on_tape(tape, a_hat, x, layers[0]);
    gcn_layer_on_tape(tape, a_hat, h, layers[1])
}

/// Node embeddings `Z` for a whole graph (no gradients).
pub fn encode(g: &Graph, encoder: &EncoderParams) -> Tensor {
    assert_eq!(
        g.feature_dim(),
        encoder.feature_dim(),
        "encode: graph features have width {} but the encoder expects {}",
        g.feature_dim(),
        encoder.feature_dim()
    );
    let mut tape = Tape::new();
    let a_hat = tape.constant(normalize_adjacency(g));
    let x = tape.constant(g.features().clone());
    let ids = [
        LayerIds {
            weight: tape.constant(encoder.layers[0].weight.clone()),
            activation: encoder.layers[0].activation,
        },
        LayerIds {
            weight: tape.constant(encoder.layers[1].weight.clone()),
            activation: encoder.layers[1].activation,
        },
    ];
    let z = encode_on_tape(&mut tape, a_hat, x, &ids);
    tape.value(z).clone()
}

/// Prototype-GNN forward over a relational structure (no gradients). The
/// structure's weight matrix is symmetric-normalized; its unit diagonal is
/// the self-loop.
pub fn pgnn_forward(
    structure: &RelationalStructure,
    support_embeddings: &Tensor,
    pgnn: &PgnnParams,
) -> Tensor {
    assert_eq!(
        structure.size(),
        support_embeddings.rows(),
        "pgnn_forward: structure has {} nodes but embeddings have {} rows",
        structure.size(),
        support_embeddings.rows()
    );
    let mut tape = Tape::new();
    let prop = tape.constant(normalize_weighted(&structure.weights));
    let emb = tape.constant(support_embeddings.clone());
    let layer = LayerIds {
        weight: tape.constant(pgnn.layer.weight.clone()),
        activation: pgnn.layer.activation,
    };
    let out = gcn_layer_on_tape(&mut tape, prop, emb, layer);
    tape.value(out).clone()
}

/// Reconstruction loss on a tape: `||A - U U^T||_F^2` with `U` the decoder
/// layer applied to `z` under the graph's propagation matrix.
pub fn reconstruction_loss_on_tape(
    tape: &mut Tape,
    adjacency: TensorId,
    a_hat: TensorId,
    z: TensorId,
    decoder: LayerIds,
) -> TensorId {
    let u = gcn_layer_on_tape(tape, a_hat, z, decoder);
    let ut = tape.transpose(u);
    let recon = tape.matmul(u, ut);
    let residual = tape.sub(adjacency, recon);
    tape.frobenius_sq(residual)
}

/// Reconstruction loss of a graph given node embeddings (no gradients).
pub fn decode_reconstruction_loss(g: &Graph, z: &Tensor, decoder: &DecoderParams) -> f64 {
    assert_eq!(
        z.rows(),
        g.n(),
        "decode_reconstruction_loss: embeddings have {} rows for a {}-node graph",
        z.rows(),
        g.n()
    );
    let mut tape = Tape::new();
    let a = tape.constant(g.adjacency().clone());
    let a_hat = tape.constant(normalize_adjacency(g));
    let z_id = tape.constant(z.clone());
    let dec = LayerIds {
        weight: tape.constant(decoder.layer.weight.clone()),
        activation: decoder.layer.activation,
    };
    let loss = reconstruction_loss_on_tape(&mut tape, a, a_hat, z_id, dec);
    tape.value(loss).scalar_value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

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
        let labels = (0..n).map(|i| i % 2).collect();
        Graph::from_edges(n, &edges, features, labels).unwrap()
    }

    fn zeroed_encoder(feature_dim: usize) -> EncoderParams {
        EncoderParams {
            layers: [
                GcnLayer::new(Tensor::zeros(feature_dim, EMBED_DIM), Activation::Relu),
                GcnLayer::new(Tensor::zeros(EMBED_DIM, EMBED_DIM), Activation::None),
            ],
        }
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let g = seeded_graph(6, 4, 0.4, 1);
        let z = encode(&g, &zeroed_encoder(4));
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.shape(), &[6, EMBED_DIM]);
    }

    #[test]
    fn single_isolated_node_propagation_is_identity() {
        let mut rng = Rng::new(2);
        let g = Graph::from_edges(
            1,
            &[],
            Tensor::from_fn(1, 3, |_, _| rng.uniform(-1.0, 1.0)),
            vec![0],
        )
        .unwrap();
        let enc = EncoderParams::init(3, &mut rng);
        let z = encode(&g, &enc);

        // With a_hat = [[1]], the embedding is act(act(x W1) W2) directly.
        let x = g.features();
        let mut h1 = vec![0.0; EMBED_DIM];
        for (j, h) in h1.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += x.at(0, k) * enc.layers[0].weight.at(k, j);
            }
            *h = acc.max(0.0);
        }
        for j in 0..EMBED_DIM {
            let mut acc = 0.0;
            for (k, h) in h1.iter().enumerate() {
                acc += h * enc.layers[1].weight.at(k, j);
            }
            assert!((z.at(0, j) - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn encode_matches_hand_rolled_matrix_chain() {
        // Independent two-step computation with naive loops, outside the tape.
        let g = seeded_graph(6, 4, 0.5, 3);
        let mut rng = Rng::new(4);
        let enc = EncoderParams::init(4, &mut rng);
        let z = encode(&g, &enc);

        let n = g.n();
        let a_hat = normalize_adjacency(&g);
        let naive_mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let (m, k, c) = (a.len(), b.len(), b[0].len());
            let mut out = vec![vec![0.0; c]; m];
            for i in 0..m {
                for kk in 0..k {
                    for j in 0..c {
                        out[i][j] += a[i][kk] * b[kk][j];
                    }
                }
            }
            out
        };
        let to_rows =
            |t: &Tensor| -> Vec<Vec<f64>> { (0..t.rows()).map(|i| t.row(i).to_vec()).collect() };
        let mut h = naive_mul(
            &naive_mul(&to_rows(&a_hat), &to_rows(g.features())),
            &to_rows(&enc.layers[0].weight),
        );
        for row in &mut h {
            for v in row.iter_mut() {
                *v = v.max(0.0);
            }
        }
        let z_oracle = naive_mul(
            &naive_mul(&to_rows(&a_hat), &h),
            &to_rows(&enc.layers[1].weight),
        );
        for i in 0..n {
            for j in 0..EMBED_DIM {
                assert!(
                    (z.at(i, j) - z_oracle[i][j]).abs() < 1e-12,
                    "mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let g = seeded_graph(8, 3, 0.4, 5);
        let mut rng = Rng::new(6);
        let enc = EncoderParams::init(3, &mut rng);
        let z = encode(&g, &enc);

        let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
        let n = g.n();
        let mut adj = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                adj.set(perm[i], perm[j], g.adjacency().at(i, j));
            }
        }
        let mut feats = Tensor::zeros(n, 3);
        for i in 0..n {
            for j in 0..3 {
                feats.set(perm[i], j, g.features().at(i, j));
            }
        }
        let mut labels = vec![0; n];
        for i in 0..n {
            labels[perm[i]] = g.label(i);
        }
        let permuted = Graph::new(adj, feats, labels).unwrap();
        let z_perm = encode(&permuted, &enc);
        for i in 0..n {
            for j in 0..EMBED_DIM {
                assert!(
                    (z_perm.at(perm[i], j) - z.at(i, j)).abs() < 1e-12,
                    "row {i} not equivariant"
                );
            }
        }
    }

    fn edgeless_structure(node_ids: Vec<usize>) -> RelationalStructure {
        let m = node_ids.len();
        RelationalStructure {
            node_ids,
            weights: Tensor::identity(m),
        }
    }

    #[test]
    fn pgnn_single_node_applies_weight_to_row() {
        let mut rng = Rng::new(7);
        let pgnn = PgnnParams::init(&mut rng);
        let emb = Tensor::from_fn(1, EMBED_DIM, |_, _| rng.uniform(-1.0, 1.0));
        let out = pgnn_forward(&edgeless_structure(vec![0]), &emb, &pgnn);
        let expected = emb.matmul(&pgnn.layer.weight);
        for j in 0..EMBED_DIM {
            assert!((out.at(0, j) - expected.at(0, j)).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_pgnn_on_edgeless_structure_is_identity() {
        let mut rng = Rng::new(8);
        let emb = Tensor::from_fn(4, EMBED_DIM, |_, _| rng.uniform(-2.0, 2.0));
        let out = pgnn_forward(
            &edgeless_structure(vec![0, 1, 2, 3]),
            &emb,
            &PgnnParams::identity(),
        );
        assert_eq!(out, emb);
    }

    #[test]
    fn pgnn_matches_direct_matrix_oracle() {
        let mut rng = Rng::new(9);
        let pgnn = PgnnParams::init(&mut rng);
        let emb = Tensor::from_fn(3, EMBED_DIM, |_, _| rng.uniform(-1.0, 1.0));
        let mut w = Tensor::identity(3);
        w.set(0, 1, 0.7);
        w.set(1, 0, 0.7);
        w.set(1, 2, 0.3);
        w.set(2, 1, 0.3);
        let structure = RelationalStructure {
            node_ids: vec![10, 11, 12],
            weights: w.clone(),
        };
        let got = pgnn_forward(&structure, &emb, &pgnn);

        // Oracle: explicit D^{-1/2} W D^{-1/2}, then naive matmuls.
        let m = 3;
        let d: Vec<f64> = (0..m)
            .map(|i| (0..m).map(|j| w.at(i, j)).sum::<f64>())
            .collect();
        let mut prop = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                prop[i][j] = w.at(i, j) / (d[i].sqrt() * d[j].sqrt());
            }
        }
        let mut mixed = vec![vec![0.0; EMBED_DIM]; m];
        for i in 0..m {
            for t in 0..m {
                for j in 0..EMBED_DIM {
                    mixed[i][j] += prop[i][t] * emb.at(t, j);
                }
            }
        }
        for i in 0..m {
            for j in 0..EMBED_DIM {
                let mut acc = 0.0;
                for t in 0..EMBED_DIM {
                    acc += mixed[i][t] * pgnn.layer.weight.at(t, j);
                }
                assert!((got.at(i, j) - acc).abs() < 1e-12, "mismatch at ({i},{j})");
            }
        }
    }

    #[test]
    fn reconstruction_loss_zero_when_decoded_matches_adjacency() {
        // Empty graph: A = 0, and a zero decoder gives U U^T = 0 = A exactly.
        let g = Graph::from_edges(4, &[], Tensor::zeros(4, EMBED_DIM), vec![0; 4]).unwrap();
        let dec = DecoderParams {
            layer: GcnLayer::new(Tensor::zeros(EMBED_DIM, EMBED_DIM), Activation::None),
        };
        let z = Tensor::filled(4, EMBED_DIM, 1.0);
        assert_eq!(decode_reconstruction_loss(&g, &z, &dec), 0.0);
    }

    #[test]
    fn reconstruction_loss_of_zero_decoder_counts_edges() {
        let g = seeded_graph(7, 3, 0.5, 10);
        let dec = DecoderParams {
            layer: GcnLayer::new(Tensor::zeros(EMBED_DIM, EMBED_DIM), Activation::None),
        };
        let z = Tensor::filled(7, EMBED_DIM, 0.3);
        let loss = decode_reconstruction_loss(&g, &z, &dec);
        assert_eq!(loss, 2.0 * g.num_edges() as f64);
    }

    #[test]
    fn reconstruction_loss_matches_direct_computation() {
        let g = seeded_graph(5, 3, 0.6, 11);
        let mut rng = Rng::new(12);
        let dec = DecoderParams::init(&mut rng);
        let z = Tensor::from_fn(5, EMBED_DIM, |_, _| rng.uniform(-1.0, 1.0));
        let got = decode_reconstruction_loss(&g, &z, &dec);

        let a_hat = normalize_adjacency(&g);
        let u = a_hat.matmul(&z).matmul(&dec.layer.weight);
        let recon = u.matmul(&u.transpose());
        let mut expected = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                let r = g.adjacency().at(i, j) - recon.at(i, j);
                expected += r * r;
            }
        }
        assert!((got - expected).abs() < 1e-10 * expected.max(1.0));
        assert!(got >= 0.0);
    }

    #[test]
    fn reconstruction_gradient_passes_finite_difference_check() {
        let g = seeded_graph(5, 3, 0.5, 13);
        let mut rng = Rng::new(14);
        let dec = DecoderParams::init(&mut rng);
        let z = Tensor::from_fn(5, EMBED_DIM, |_, _| rng.uniform(-0.5, 0.5));
        let a = g.adjacency().clone();
        let a_hat = normalize_adjacency(&g);

        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let a_id = tape.constant(a.clone());
            let ah_id = tape.constant(a_hat.clone());
            let z_id = tape.constant(z.clone());
            let layer = LayerIds {
                weight: ids[0],
                activation: Activation::None,
            };
            reconstruction_loss_on_tape(tape, a_id, ah_id, z_id, layer)
        };
        let err = gradcheck(&f, std::slice::from_ref(&dec.layer.weight), 1e-5, 1);
        assert!(err < 1e-5, "max relative error {err}");
    }
}
