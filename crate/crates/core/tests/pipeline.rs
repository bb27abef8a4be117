//! Cross-module pipeline tests: the ablated forward pass against an
//! independent minimal prototypical-network implementation, and the dataset
//! golden fixture.

use gfl_core::graph::Graph;
use gfl_core::proto::Episode;
use gfl_core::rng::Rng;
use gfl_core::taskgen::{generate_family, load_family, save_family, FamilyConfig};
use gfl_core::trainer::{forward_episode, sample_episode, ModelParams, TrainConfig};

mod protonet_oracle {
    //! A self-contained prototypical network on plain nested vectors: two
    //! symmetric-normalized GCN layers, mean prototypes, inner-product
    //! softmax. No tape, no shared kernels.

    use gfl_core::graph::Graph;
    use gfl_core::proto::Episode;

    pub struct Oracle {
        pub loss: f64,
        pub accuracy: f64,
        pub probabilities: Vec<Vec<f64>>,
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (m, k, n) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0.0; n]; m];
        for i in 0..m {
            for kk in 0..k {
                for j in 0..n {
                    out[i][j] += a[i][kk] * b[kk][j];
                }
            }
        }
        out
    }

    pub fn run(g: &Graph, episode: &Episode, w1: &[Vec<f64>], w2: &[Vec<f64>]) -> Oracle {
        let n = g.n();
        // a_hat = D^-1/2 (A + I) D^-1/2
        let mut a_hat = vec![vec![0.0; n]; n];
        let deg: Vec<f64> = (0..n).map(|i| g.degree(i) as f64 + 1.0).collect();
        for i in 0..n {
            for j in 0..n {
                let a = if i == j { 1.0 } else { g.adjacency().at(i, j) };
                a_hat[i][j] = a / (deg[i].sqrt() * deg[j].sqrt());
            }
        }
        let x: Vec<Vec<f64>> = (0..n).map(|i| g.features().row(i).to_vec()).collect();

        // Two GCN layers: relu((a_hat x) w1), then (a_hat h) w2.
        let mut h = matmul(&matmul(&a_hat, &x), w1);
        for row in &mut h {
            for v in row.iter_mut() {
                *v = v.max(0.0);
            }
        }
        let z = matmul(&matmul(&a_hat, &h), w2);
        let d = z[0].len();

        let k = episode.num_classes();
        let mut prototypes = vec![vec![0.0; d]; k];
        for class in 0..k {
            let support = episode.support(class);
            for &node in support {
                for j in 0..d {
                    prototypes[class][j] += z[node][j];
                }
            }
            for v in prototypes[class].iter_mut() {
                *v /= support.len() as f64;
            }
        }

        let queries = episode.queries_with_labels();
        let mut loss = 0.0;
        let mut correct = 0usize;
        let mut probabilities = Vec::new();
        for &(node, label) in &queries {
            let logits: Vec<f64> = (0..k)
                .map(|c| (0..d).map(|j| z[node][j] * prototypes[c][j]).sum())
                .collect();
            let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
            loss += max + total.ln() - logits[label];
            let mut best = 0;
            for (c, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
            probabilities.push(probs);
        }
        Oracle {
            loss,
            accuracy: correct as f64 / queries.len() as f64,
            probabilities,
        }
    }
}

fn sample_from(g: &Graph, shots: usize, seed: u64) -> Episode {
    sample_episode(g, 0, shots, 0, &mut Rng::new(seed)).unwrap()
}

#[test]
fn ablated_pipeline_matches_minimal_protonet() {
    // All four ablation switches on: the full pipeline must reduce exactly to
    // a plain prototypical network.
    let family = generate_family(&FamilyConfig {
        classes: 3,
        nodes_per_class_min: 6,
        nodes_per_class_max: 9,
        feature_dim: 8,
        train_graphs: 3,
        val_graphs: 1,
        test_graphs: 1,
        seed: 42,
        ..FamilyConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        shots: 2,
        mean_prototype: true,
        no_gate: true,
        flat_hierarchy: true,
        no_reconstruction: true,
        ..TrainConfig::default()
    };

    let mut rng = Rng::new(7);
    for (round, g) in family.all_graphs().enumerate() {
        let params = ModelParams::init(g.feature_dim(), &cfg, &mut rng);
        let w1: Vec<Vec<f64>> = (0..params.encoder.layers[0].weight.rows())
            .map(|i| params.encoder.layers[0].weight.row(i).to_vec())
            .collect();
        let w2: Vec<Vec<f64>> = (0..params.encoder.layers[1].weight.rows())
            .map(|i| params.encoder.layers[1].weight.row(i).to_vec())
            .collect();

        for e in 0..4 {
            let episode = sample_from(g, 2, 100 + round as u64 * 10 + e);
            let ours = forward_episode(g, &episode, &params, &cfg);
            let oracle = protonet_oracle::run(g, &episode, &w1, &w2);
            assert!(
                (ours.loss - oracle.loss).abs() <= 1e-12 * oracle.loss.abs().max(1.0),
                "loss mismatch: {} vs {}",
                ours.loss,
                oracle.loss
            );
            assert_eq!(ours.accuracy, oracle.accuracy);
            for (i, row) in oracle.probabilities.iter().enumerate() {
                for (c, &p) in row.iter().enumerate() {
                    assert!(
                        (ours.probabilities.at(i, c) - p).abs() <= 1e-12,
                        "probability mismatch at ({i},{c})"
                    );
                }
            }
        }
    }
}

#[test]
fn golden_family_fixture_still_loads() {
    // The committed fixture pins both the container format and the seeded
    // generator output. Regenerating with the same config must reproduce it.
    let fixture =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_family.gfl");
    let loaded = load_family(&fixture).expect("fixture loads");
    let regenerated = generate_family(&loaded.config).expect("config regenerates");
    assert_eq!(
        loaded, regenerated,
        "generator or container drifted from the golden fixture"
    );

    // And the bytes themselves are stable.
    let dir = std::env::temp_dir().join(format!("gfl-golden-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let rewritten = dir.join("rewritten.gfl");
    save_family(&regenerated, &rewritten).unwrap();
    assert_eq!(
        std::fs::read(&fixture).unwrap(),
        std::fs::read(&rewritten).unwrap(),
        "serialized bytes drifted from the golden fixture"
    );
    std::fs::remove_dir_all(&dir).ok();
}
