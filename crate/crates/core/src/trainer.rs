//! Episodic meta-training, evaluation on held-out graphs, ablation switches,
//! and the k-NN / label-propagation baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    build_relational_structure, label_propagation, normalize_adjacency, normalize_weighted, Graph,
    SimilarityConfig,
};
use crate::hierarchy::{
    aggregate_on_tape, gate_on_tape, hierarchy_levels_on_tape, GateParams, HierarchyConfig,
    HierarchyIds, HierarchyParams, LevelIds,
};
use crate::metrics::StepRecord;
use crate::models::{
    encode, encode_on_tape, gcn_layer_on_tape, reconstruction_loss_on_tape, DecoderParams,
    EncoderParams, LayerIds, PgnnParams, EMBED_DIM,
};
use crate::parallel::par_map;
use crate::proto::{ClassSplit, DistanceKind, Episode, PoolKind};
use crate::rng::Rng;
use crate::tensor::{gradcheck, Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer '{other}' (expected sgd | adam)"
            ))),
        }
    }
}

/// Which matrix feeds level 1 of the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HierarchyInputs {
    /// Raw node features (keeps the gate decoupled from encoder dynamics).
    Features,
    /// Encoder output.
    Embeddings,
}

impl HierarchyInputs {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(HierarchyInputs::Features),
            "embeddings" => Ok(HierarchyInputs::Embeddings),
            other => Err(Error::InvalidConfig(format!(
                "unknown hierarchy input '{other}' (expected features | embeddings)"
            ))),
        }
    }
}

/// Full training configuration, including the ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Gradient step size.
    pub alpha: f64,
    /// Reconstruction loss weight.
    pub gamma: f64,
    /// Support nodes per class.
    pub shots: usize,
    /// Graphs (episodes) per training step.
    pub batch_graphs: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// M1a: plain mean prototypes instead of the structured path.
    pub mean_prototype: bool,
    /// M2a: drop the hierarchical representation gate.
    pub no_gate: bool,
    /// M2b: flat single-level representation.
    pub flat_hierarchy: bool,
    /// M3: drop the reconstruction loss.
    pub no_reconstruction: bool,
    pub similarity: SimilarityConfig,
    pub distance: DistanceKind,
    pub hierarchy: HierarchyConfig,
    pub hierarchy_inputs: HierarchyInputs,
    /// Pooling over prototype-GNN rows.
    pub pool: PoolKind,
    /// Steps between meta-validation evaluations.
    pub val_interval: usize,
    /// Episodes per graph during evaluation.
    pub eval_episodes: usize,
    /// Cap on query nodes per class (0 = use every non-support node).
    pub max_query_per_class: usize,
    /// Worker count for data-parallel sections (1 = sequential, 0 = all cores).
    pub workers: usize,
    /// Neighbor count for the k-NN baseline.
    pub knn_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.01,
            gamma: 1.0,
            shots: 10,
            batch_graphs: 4,
            steps: 1200,
            seed: 1,
            // Plain gradient descent diverges on the summed Frobenius
            // reconstruction at these graph sizes; `sgd` remains available.
            optimizer: OptimizerKind::Adam,
            mean_prototype: false,
            no_gate: false,
            flat_hierarchy: false,
            no_reconstruction: false,
            similarity: SimilarityConfig::default(),
            distance: DistanceKind::InnerProduct,
            hierarchy: HierarchyConfig::default(),
            hierarchy_inputs: HierarchyInputs::Features,
            pool: PoolKind::Mean,
            val_interval: 50,
            eval_episodes: 25,
            max_query_per_class: 0,
            workers: 1,
            knn_k: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::InvalidConfig("alpha must be positive".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidConfig("gamma must be non-negative".into()));
        }
        if self.shots == 0 {
            return Err(Error::InvalidConfig("shots must be at least 1".into()));
        }
        if self.batch_graphs == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig(
                "batch_graphs and steps must be positive".into(),
            ));
        }
        if self.val_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::InvalidConfig(
                "val_interval and eval_episodes must be positive".into(),
            ));
        }
        if self.knn_k == 0 {
            return Err(Error::InvalidConfig("knn_k must be at least 1".into()));
        }
        self.similarity.validate()?;
        self.hierarchy.validate()?;
        Ok(())
    }

    /// Hierarchy shape after applying the flat ablation.
    pub fn effective_hierarchy(&self) -> HierarchyConfig {
        if self.flat_hierarchy {
            HierarchyConfig {
                levels: 1,
                community_counts: vec![],
                aggregator: self.hierarchy.aggregator,
            }
        } else {
            self.hierarchy.clone()
        }
    }

    /// True when the hierarchical gate participates in the forward pass.
    fn gate_active(&self) -> bool {
        !self.no_gate && !self.mean_prototype
    }
}

/// Every learnable parameter of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub pgnn: PgnnParams,
    pub decoder: DecoderParams,
    pub hierarchy: HierarchyParams,
    pub gate: GateParams,
}

impl ModelParams {
    /// Seeded initialization. Draw order is fixed (encoder, prototype GNN,
    /// decoder, hierarchy, gate) so a seed pins every weight.
    pub fn init(feature_dim: usize, cfg: &TrainConfig, rng: &mut Rng) -> Self {
        let encoder = EncoderParams::init(feature_dim, rng);
        let pgnn = PgnnParams::init(rng);
        let decoder = DecoderParams::init(rng);
        let hier_input = match cfg.hierarchy_inputs {
            HierarchyInputs::Features => feature_dim,
            HierarchyInputs::Embeddings => EMBED_DIM,
        };
        let hierarchy = HierarchyParams::init(hier_input, &cfg.effective_hierarchy(), rng);
        let gate = GateParams::init(pgnn.param_count(), rng);
        ModelParams {
            encoder,
            pgnn,
            decoder,
            hierarchy,
            gate,
        }
    }

    /// Enumerates every parameter with a stable name, in a fixed order shared
    /// by the optimizer, the gradient pipeline and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (
                "encoder.layer1.weight".to_string(),
                &self.encoder.layers[0].weight,
            ),
            (
                "encoder.layer2.weight".to_string(),
                &self.encoder.layers[1].weight,
            ),
            ("pgnn.weight".to_string(), &self.pgnn.layer.weight),
            ("decoder.weight".to_string(), &self.decoder.layer.weight),
            (
                "hierarchy.level1_fgnn.weight".to_string(),
                &self.hierarchy.level1_fgnn.weight,
            ),
        ];
        for (r, level) in self.hierarchy.levels.iter().enumerate() {
            out.push((
                format!("hierarchy.level{}.agnn.weight", r + 1),
                &level.agnn.weight,
            ));
            out.push((
                format!("hierarchy.level{}.fgnn.weight", r + 1),
                &level.fgnn.weight,
            ));
        }
        out.push(("gate.w_g".to_string(), &self.gate.w_g));
        out.push(("gate.b_g".to_string(), &self.gate.b_g));
        out.push(("gate.query".to_string(), &self.gate.query));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let [layer1, layer2] = &mut self.encoder.layers;
        let mut out = vec![
            ("encoder.layer1.weight".to_string(), &mut layer1.weight),
            ("encoder.layer2.weight".to_string(), &mut layer2.weight),
            ("pgnn.weight".to_string(), &mut self.pgnn.layer.weight),
            ("decoder.weight".to_string(), &mut self.decoder.layer.weight),
            (
                "hierarchy.level1_fgnn.weight".to_string(),
                &mut self.hierarchy.level1_fgnn.weight,
            ),
        ];
        for (r, level) in self.hierarchy.levels.iter_mut().enumerate() {
            out.push((
                format!("hierarchy.level{}.agnn.weight", r + 1),
                &mut level.agnn.weight,
            ));
            out.push((
                format!("hierarchy.level{}.fgnn.weight", r + 1),
                &mut level.fgnn.weight,
            ));
        }
        out.push(("gate.w_g".to_string(), &mut self.gate.w_g));
        out.push(("gate.b_g".to_string(), &mut self.gate.b_g));
        out.push(("gate.query".to_string(), &mut self.gate.query));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds parameters from checkpoint entries, validating the registry.
    pub fn from_named(
        feature_dim: usize,
        cfg: &TrainConfig,
        entries: &[(String, Tensor)],
    ) -> Result<Self> {
        let mut params = ModelParams::init(feature_dim, cfg, &mut Rng::new(0));
        let expected = params.named().len();
        if entries.len() != expected {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} parameters, model expects {expected}",
                entries.len()
            )));
        }
        for (slot_index, (name, slot)) in params.named_mut().into_iter().enumerate() {
            let (entry_name, tensor) = &entries[slot_index];
            if *entry_name != name {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {slot_index} is named '{entry_name}', expected '{name}'"
                )));
            }
            if tensor.shape() != slot.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(params)
    }
}

/// Samples a support/query split: `shots` support nodes per class without
/// replacement, every remaining node of the class as query (optionally capped).
pub fn sample_episode(
    g: &Graph,
    graph_id: usize,
    shots: usize,
    max_query_per_class: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    let mut classes = Vec::with_capacity(g.num_classes());
    for class in 0..g.num_classes() {
        let nodes = g.class_nodes(class);
        if nodes.len() < shots + 1 {
            return Err(Error::ClassTooSmall {
                class,
                available: nodes.len(),
                required: shots + 1,
            });
        }
        let picked = rng.sample_without_replacement(nodes.len(), shots);
        let mut support: Vec<usize> = picked.iter().map(|&i| nodes[i]).collect();
        support.sort_unstable();
        let mut query: Vec<usize> = nodes
            .iter()
            .copied()
            .filter(|n| !support.contains(n))
            .collect();
        if max_query_per_class > 0 && query.len() > max_query_per_class {
            let keep = rng.sample_without_replacement(query.len(), max_query_per_class);
            let mut capped: Vec<usize> = keep.iter().map(|&i| query[i]).collect();
            capped.sort_unstable();
            query = capped;
        }
        classes.push(ClassSplit { support, query });
    }
    Episode::new(graph_id, classes, g)
}

/// Values produced by one episode forward pass.
#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    /// Episodic matching loss (sum of per-query negative log-probabilities).
    pub loss: f64,
    /// Reconstruction loss, 0.0 when disabled.
    pub rec_loss: f64,
    /// Fraction of queries whose predicted class matches their label.
    pub accuracy: f64,
    /// Per-query class probabilities, rows aligned with `query_labels`.
    pub probabilities: Tensor,
    pub predictions: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl EpisodeOutput {
    pub fn objective(&self, gamma: f64) -> f64 {
        self.loss + gamma * self.rec_loss
    }
}

/// Tape handles for all registered parameters, in `named()` order.
struct RegisteredModel {
    encoder: [LayerIds; 2],
    pgnn: LayerIds,
    decoder: LayerIds,
    hierarchy: HierarchyIds,
    w_g: TensorId,
    b_g: TensorId,
    query: TensorId,
    all: Vec<TensorId>,
}

/// Maps a flat id list (one per `named()` entry) to structured handles.
fn model_from_ids(params: &ModelParams, ids: &[TensorId]) -> RegisteredModel {
    let expected = params.named().len();
    assert_eq!(
        ids.len(),
        expected,
        "parameter id list does not match the registry"
    );
    let mut cursor = ids.iter().copied();
    let mut next = || cursor.next().expect("registry length checked above");

    let encoder = [
        LayerIds {
            weight: next(),
            activation: params.encoder.layers[0].activation,
        },
        LayerIds {
            weight: next(),
            activation: params.encoder.layers[1].activation,
        },
    ];
    let pgnn = LayerIds {
        weight: next(),
        activation: params.pgnn.layer.activation,
    };
    let decoder = LayerIds {
        weight: next(),
        activation: params.decoder.layer.activation,
    };
    let level1_fgnn = LayerIds {
        weight: next(),
        activation: params.hierarchy.level1_fgnn.activation,
    };
    let mut levels = Vec::new();
    for level in &params.hierarchy.levels {
        levels.push(LevelIds {
            agnn: LayerIds {
                weight: next(),
                activation: level.agnn.activation,
            },
            fgnn: LayerIds {
                weight: next(),
                activation: level.fgnn.activation,
            },
        });
    }
    let hierarchy = HierarchyIds {
        level1_fgnn,
        levels,
    };
    let w_g = next();
    let b_g = next();
    let query = next();
    RegisteredModel {
        encoder,
        pgnn,
        decoder,
        hierarchy,
        w_g,
        b_g,
        query,
        all: ids.to_vec(),
    }
}

fn register_model(tape: &mut Tape, params: &ModelParams, with_grad: bool) -> RegisteredModel {
    let ids: Vec<TensorId> = params
        .named()
        .into_iter()
        .map(|(_, tensor)| {
            if with_grad {
                tape.leaf(tensor.clone().with_grad())
            } else {
                tape.constant(tensor.clone())
            }
        })
        .collect();
    model_from_ids(params, &ids)
}

struct EpisodeTape {
    episodic: TensorId,
    rec: Option<TensorId>,
    total: TensorId,
    probs: TensorId,
    query_labels: Vec<usize>,
}

/// The full episode pipeline on a tape: encode, (hierarchy -> aggregate ->
/// gate unless ablated), per-class relational structures and prototypes,
/// episodic loss, plus the reconstruction term unless ablated.
fn build_episode_objective(
    tape: &mut Tape,
    g: &Graph,
    episode: &Episode,
    model: &RegisteredModel,
    cfg: &TrainConfig,
) -> EpisodeTape {
    let a_hat = tape.constant(normalize_adjacency(g));
    let x = tape.constant(g.features().clone());
    let z = encode_on_tape(tape, a_hat, x, &model.encoder);

    let rec = if cfg.no_reconstruction {
        None
    } else {
        let a = tape.constant(g.adjacency().clone());
        Some(reconstruction_loss_on_tape(
            tape,
            a,
            a_hat,
            z,
            model.decoder,
        ))
    };

    // Graph-specific prototype weights through the hierarchical gate.
    let phi = if cfg.gate_active() {
        let a_raw = tape.constant(g.adjacency().clone());
        let x1 = match cfg.hierarchy_inputs {
            HierarchyInputs::Features => x,
            HierarchyInputs::Embeddings => z,
        };
        let levels = hierarchy_levels_on_tape(tape, a_raw, a_hat, x1, &model.hierarchy);
        let (graph_vec, _beta) =
            aggregate_on_tape(tape, &levels, cfg.hierarchy.aggregator, model.query);
        let (gated, _gate) = gate_on_tape(tape, graph_vec, model.w_g, model.b_g, model.pgnn.weight);
        LayerIds {
            weight: gated,
            activation: model.pgnn.activation,
        }
    } else {
        model.pgnn
    };

    let mut prototypes = Vec::with_capacity(episode.num_classes());
    for class in 0..episode.num_classes() {
        let support = episode.support(class);
        let support_emb = tape.gather_rows(z, support);
        let proto = if cfg.mean_prototype {
            tape.mean_pool_rows(support_emb)
        } else {
            let structure = build_relational_structure(g, support, &cfg.similarity);
            let prop = tape.constant(normalize_weighted(&structure.weights));
            let mixed = gcn_layer_on_tape(tape, prop, support_emb, phi);
            match cfg.pool {
                PoolKind::Mean => tape.mean_pool_rows(mixed),
                PoolKind::Max => tape.max_pool_rows(mixed),
            }
        };
        prototypes.push(proto);
    }
    let proto_matrix = tape.concat_rows(&prototypes);

    let queries = episode.queries_with_labels();
    let query_nodes: Vec<usize> = queries.iter().map(|&(n, _)| n).collect();
    let query_labels: Vec<usize> = queries.iter().map(|&(_, c)| c).collect();
    let query_emb = tape.gather_rows(z, &query_nodes);
    let (episodic, probs) = crate::proto::episode_loss_on_tape(
        tape,
        query_emb,
        &query_labels,
        proto_matrix,
        cfg.distance,
    );

    let total = match rec {
        Some(rec_id) => {
            let weighted = tape.scale(rec_id, cfg.gamma);
            tape.add(episodic, weighted)
        }
        None => episodic,
    };

    EpisodeTape {
        episodic,
        rec,
        total,
        probs,
        query_labels,
    }
}

fn extract_output(tape: &Tape, built: &EpisodeTape) -> EpisodeOutput {
    let probs = tape.value(built.probs).clone();
    let predictions: Vec<usize> = (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let correct = predictions
        .iter()
        .zip(&built.query_labels)
        .filter(|(p, l)| p == l)
        .count();
    EpisodeOutput {
        loss: tape.value(built.episodic).scalar_value(),
        rec_loss: built.rec.map_or(0.0, |id| tape.value(id).scalar_value()),
        accuracy: correct as f64 / built.query_labels.len().max(1) as f64,
        probabilities: probs,
        predictions,
        query_labels: built.query_labels.clone(),
    }
}

/// Forward pass of one episode (no gradients).
pub fn forward_episode(
    g: &Graph,
    episode: &Episode,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> EpisodeOutput {
    let mut tape = Tape::new();
    let model = register_model(&mut tape, params, false);
    let built = build_episode_objective(&mut tape, g, episode, &model, cfg);
    extract_output(&tape, &built)
}

/// Forward plus backward: returns the episode output and the gradient of
/// `loss + gamma * rec_loss` for every parameter, in `named()` order.
pub fn episode_gradients(
    g: &Graph,
    episode: &Episode,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> (EpisodeOutput, Vec<Tensor>) {
    let mut tape = Tape::new();
    let model = register_model(&mut tape, params, true);
    let built = build_episode_objective(&mut tape, g, episode, &model, cfg);
    let output = extract_output(&tape, &built);
    tape.backward(built.total);
    let grads = model.all.iter().map(|&id| tape.grad(id)).collect();
    (output, grads)
}

/// Finite-difference check of the full objective's gradient at `params`.
pub fn gradcheck_full_objective(
    g: &Graph,
    episode: &Episode,
    params: &ModelParams,
    cfg: &TrainConfig,
    step: f64,
    workers: usize,
) -> f64 {
    let points: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let f = |tape: &mut Tape, ids: &[TensorId]| {
        let model = model_from_ids(params, ids);
        build_episode_objective(tape, g, episode, &model, cfg).total
    };
    gradcheck(&f, &points, step, workers)
}

enum OptimizerState {
    Sgd,
    Adam {
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        t: usize,
    },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => {
                let zeros: Vec<Tensor> = params
                    .named()
                    .iter()
                    .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                    .collect();
                OptimizerState::Adam {
                    m: zeros.clone(),
                    v: zeros,
                    t: 0,
                }
            }
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], alpha: f64) {
        match self {
            OptimizerState::Sgd => {
                for ((_, p), g) in params.named_mut().into_iter().zip(grads) {
                    sgd_update(p, g, alpha);
                }
            }
            OptimizerState::Adam { m, v, t } => {
                *t += 1;
                let t_now = *t;
                for (((_, p), g), (m_i, v_i)) in params
                    .named_mut()
                    .into_iter()
                    .zip(grads)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    adam_update(p, g, m_i, v_i, t_now, alpha);
                }
            }
        }
    }
}

/// Plain gradient descent: `p <- p - alpha * g`.
pub(crate) fn sgd_update(p: &mut Tensor, g: &Tensor, alpha: f64) {
    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
        *pv -= alpha * gv;
    }
}

fn adam_update(p: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor, t: usize, alpha: f64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((pv, gv), mv), vv) in p
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut().iter_mut())
        .zip(v.data_mut().iter_mut())
    {
        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
        let m_hat = *mv / bc1;
        let v_hat = *vv / bc2;
        *pv -= alpha * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Result of a training run: the selected parameters and the metrics history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<StepRecord>,
    pub best_val_accuracy: Option<f64>,
    pub best_step: usize,
}

/// Episodic meta-training over the meta-train graphs, with periodic
/// evaluation on the meta-validation graphs. Returns the parameters with the
/// best validation accuracy (final parameters if validation never ran).
///
/// Episode sampling is sequential and single-stream; only the forward and
/// backward passes fan out over workers, and their gradients are reduced in a
/// fixed order, so results do not depend on the worker count.
pub fn train(
    train_graphs: &[Graph],
    val_graphs: &[Graph],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_graphs.is_empty() {
        return Err(Error::InvalidConfig("meta-train split is empty".into()));
    }
    let feature_dim = train_graphs[0].feature_dim();
    for g in train_graphs.iter().chain(val_graphs) {
        if g.feature_dim() != feature_dim {
            return Err(Error::InvalidConfig(
                "graphs in a family must share one feature dimension".into(),
            ));
        }
    }

    let root = Rng::new(cfg.seed);
    let mut init_rng = root.derive(0);
    let mut episode_rng = root.derive(1);
    let eval_rng = root.derive(2);

    let mut params = ModelParams::init(feature_dim, cfg, &mut init_rng);
    let mut optimizer = OptimizerState::new(cfg.optimizer, &params);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for step in 1..=cfg.steps {
        // Divergence guard. The bound is far beyond anything a converging run
        // reaches but low enough that one forward pass cannot overflow.
        if params
            .named()
            .iter()
            .any(|(_, t)| !t.all_finite() || t.max_abs() > 1e20)
        {
            return Err(Error::TrainAbort {
                step,
                reason: "parameters diverged after the previous update".into(),
            });
        }
        let batch: Vec<usize> = if cfg.batch_graphs >= train_graphs.len() {
            (0..train_graphs.len()).collect()
        } else {
            episode_rng.sample_without_replacement(train_graphs.len(), cfg.batch_graphs)
        };
        let episodes: Vec<(usize, Episode)> = batch
            .iter()
            .map(|&gi| {
                sample_episode(
                    &train_graphs[gi],
                    gi,
                    cfg.shots,
                    cfg.max_query_per_class,
                    &mut episode_rng,
                )
                .map(|ep| (gi, ep))
            })
            .collect::<Result<_>>()?;

        let results = par_map(&episodes, cfg.workers, |(gi, ep)| {
            episode_gradients(&train_graphs[*gi], ep, &params, cfg)
        });

        let batch_size = results.len() as f64;
        let mut mean_loss = 0.0;
        let mut mean_rec = 0.0;
        let mut mean_grads: Option<Vec<Tensor>> = None;
        for (output, grads) in &results {
            mean_loss += output.loss / batch_size;
            mean_rec += output.rec_loss / batch_size;
            match &mut mean_grads {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                            *av += gv / batch_size;
                        }
                    }
                }
                None => {
                    mean_grads = Some(grads.iter().map(|g| g.scale(1.0 / batch_size)).collect())
                }
            }
        }
        let mean_grads = mean_grads.expect("batch is nonempty");

        let objective = mean_loss + cfg.gamma * mean_rec;
        if !objective.is_finite() {
            return Err(Error::TrainAbort {
                step,
                reason: format!(
                    "non-finite loss (episodic {mean_loss}, reconstruction {mean_rec})"
                ),
            });
        }

        optimizer.step(&mut params, &mean_grads, cfg.alpha);

        let mut record = StepRecord {
            step,
            loss: mean_loss,
            rec_loss: mean_rec,
            val_accuracy: None,
        };
        if !val_graphs.is_empty() && (step % cfg.val_interval == 0 || step == cfg.steps) {
            let mut step_rng = eval_rng.derive(step as u64);
            let summary = evaluate(val_graphs, &params, cfg, cfg.eval_episodes, &mut step_rng)?;
            record.val_accuracy = Some(summary.mean_accuracy);
            let improved = best
                .as_ref()
                .map(|(acc, _, _)| summary.mean_accuracy > *acc)
                .unwrap_or(true);
            if improved {
                best = Some((summary.mean_accuracy, step, params.clone()));
            }
        }
        history.push(record);
    }

    let (best_val_accuracy, best_step, final_params) = match best {
        Some((acc, step, snapshot)) => (Some(acc), step, snapshot),
        None => (None, cfg.steps, params),
    };
    Ok(TrainOutcome {
        params: final_params,
        history,
        best_val_accuracy,
        best_step,
    })
}

/// Accuracy summary over evaluation episodes: mean plus a normal-approximation
/// 95% confidence half-width (`1.96 * stderr`). The raw per-episode values
/// ride along for pooling but stay out of serialized reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
    #[serde(skip)]
    pub episode_accuracies: Vec<f64>,
}

impl EvalSummary {
    pub fn from_accuracies(accuracies: &[f64]) -> Self {
        let n = accuracies.len();
        assert!(n > 0, "evaluation produced no episodes");
        let mean = accuracies.iter().sum::<f64>() / n as f64;
        let ci95 = if n < 2 {
            0.0
        } else {
            let var = accuracies
                .iter()
                .map(|a| (a - mean) * (a - mean))
                .sum::<f64>()
                / (n as f64 - 1.0);
            1.96 * (var / n as f64).sqrt()
        };
        EvalSummary {
            mean_accuracy: mean,
            ci95,
            episodes: n,
            episode_accuracies: accuracies.to_vec(),
        }
    }
}

/// Samples `episodes_per_graph` episodes from every graph and evaluates the
/// model on each; episodes are sampled sequentially, forwards run in parallel.
pub fn evaluate(
    graphs: &[Graph],
    params: &ModelParams,
    cfg: &TrainConfig,
    episodes_per_graph: usize,
    rng: &mut Rng,
) -> Result<EvalSummary> {
    let episodes = sample_eval_episodes(graphs, cfg, episodes_per_graph, rng)?;
    let accuracies = par_map(&episodes, cfg.workers, |(gi, ep)| {
        forward_episode(&graphs[*gi], ep, params, cfg).accuracy
    });
    Ok(EvalSummary::from_accuracies(&accuracies))
}

fn sample_eval_episodes(
    graphs: &[Graph],
    cfg: &TrainConfig,
    episodes_per_graph: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, Episode)>> {
    if graphs.is_empty() {
        return Err(Error::InvalidConfig("evaluation split is empty".into()));
    }
    let mut episodes = Vec::with_capacity(graphs.len() * episodes_per_graph);
    for (gi, g) in graphs.iter().enumerate() {
        let mut graph_rng = rng.derive(gi as u64);
        for _ in 0..episodes_per_graph {
            episodes.push((
                gi,
                sample_episode(g, gi, cfg.shots, cfg.max_query_per_class, &mut graph_rng)?,
            ));
        }
    }
    Ok(episodes)
}

/// Model accuracy next to the label-propagation and k-NN baselines, measured
/// on identical episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub model: EvalSummary,
    pub label_prop: EvalSummary,
    pub knn: EvalSummary,
}

/// `knn_encoder` is the embedding function for the k-NN baseline — typically
/// the autoencoder-pretrained encoder, so the baseline is learned but not
/// shaped by the matching objective.
pub fn evaluate_with_baselines(
    graphs: &[Graph],
    params: &ModelParams,
    knn_encoder: &EncoderParams,
    cfg: &TrainConfig,
    episodes_per_graph: usize,
    rng: &mut Rng,
) -> Result<BaselineComparison> {
    let episodes = sample_eval_episodes(graphs, cfg, episodes_per_graph, rng)?;
    let rows = par_map(&episodes, cfg.workers, |(gi, ep)| {
        let g = &graphs[*gi];
        let model_acc = forward_episode(g, ep, params, cfg).accuracy;
        let lp_acc = label_prop_accuracy(g, ep);
        let knn_acc = knn_baseline(g, ep, knn_encoder, cfg.knn_k, cfg.distance);
        (model_acc, lp_acc, knn_acc)
    });
    let model: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let lp: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let knn: Vec<f64> = rows.iter().map(|r| r.2).collect();
    Ok(BaselineComparison {
        model: EvalSummary::from_accuracies(&model),
        label_prop: EvalSummary::from_accuracies(&lp),
        knn: EvalSummary::from_accuracies(&knn),
    })
}

/// Pretrains an encoder on the reconstruction objective alone, feeding the
/// graphs one by one. This is the k-NN baseline's embedding function: learned
/// from the meta-training graphs, but never shaped by the episodic matching
/// loss.
pub fn pretrain_autoencoder_encoder(
    graphs: &[Graph],
    cfg: &TrainConfig,
    steps: usize,
) -> Result<EncoderParams> {
    if graphs.is_empty() {
        return Err(Error::InvalidConfig(
            "autoencoder pretraining needs graphs".into(),
        ));
    }
    let feature_dim = graphs[0].feature_dim();
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.derive(0);
    // Same draw order as ModelParams::init keeps the encoder initialization
    // identical to the meta-trained model's starting point.
    let mut params = ModelParams::init(feature_dim, cfg, &mut init_rng);
    let mut optimizer = OptimizerState::new(cfg.optimizer, &params);

    for step in 0..steps {
        if params
            .named()
            .iter()
            .any(|(_, t)| !t.all_finite() || t.max_abs() > 1e20)
        {
            return Err(Error::TrainAbort {
                step,
                reason: "autoencoder pretraining diverged".into(),
            });
        }
        let g = &graphs[step % graphs.len()];
        let mut tape = Tape::new();
        let model = register_model(&mut tape, &params, true);
        let a_hat = tape.constant(normalize_adjacency(g));
        let x = tape.constant(g.features().clone());
        let z = encode_on_tape(&mut tape, a_hat, x, &model.encoder);
        let a = tape.constant(g.adjacency().clone());
        let rec = reconstruction_loss_on_tape(&mut tape, a, a_hat, z, model.decoder);
        tape.backward(rec);
        let grads: Vec<Tensor> = model.all.iter().map(|&id| tape.grad(id)).collect();
        optimizer.step(&mut params, &grads, cfg.alpha);
    }
    Ok(params.encoder)
}

/// Label propagation from the episode's support labels, scored on its queries.
pub fn label_prop_accuracy(g: &Graph, episode: &Episode) -> f64 {
    let mut labeled = Vec::with_capacity(episode.total_support());
    for class in 0..episode.num_classes() {
        for &node in episode.support(class) {
            labeled.push((node, class));
        }
    }
    let outcome = label_propagation(g, &labeled, 200, 1e-9);
    let queries = episode.queries_with_labels();
    let correct = queries
        .iter()
        .filter(|&&(node, class)| outcome.predicted[node] == class)
        .count();
    correct as f64 / queries.len().max(1) as f64
}

/// k-nearest-neighbor baseline on encoder embeddings: majority vote among the
/// `k` closest support nodes by the configured distance, ties toward the
/// lower class index.
pub fn knn_baseline(
    g: &Graph,
    episode: &Episode,
    encoder: &EncoderParams,
    k: usize,
    kind: DistanceKind,
) -> f64 {
    let total_support = episode.total_support();
    assert!(
        k >= 1 && k <= total_support,
        "knn_baseline: k = {k} is invalid for {total_support} support nodes"
    );
    let z = encode(g, encoder);
    let mut supports = Vec::with_capacity(total_support);
    for class in 0..episode.num_classes() {
        for &node in episode.support(class) {
            supports.push((node, class));
        }
    }
    let queries = episode.queries_with_labels();
    let mut correct = 0;
    for &(node, class) in &queries {
        let mut dists: Vec<(f64, usize)> = supports
            .iter()
            .enumerate()
            .map(|(idx, &(s_node, _))| {
                (
                    crate::proto::distance(z.row(node), z.row(s_node), kind),
                    idx,
                )
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; episode.num_classes()];
        for &(_, idx) in dists.iter().take(k) {
            votes[supports[idx].1] += 1;
        }
        let mut winner = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[winner] {
                winner = c;
            }
        }
        if winner == class {
            correct += 1;
        }
    }
    correct as f64 / queries.len().max(1) as f64
}
