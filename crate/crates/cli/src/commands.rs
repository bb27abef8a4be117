//! Subcommand implementations. Each command prints a human-readable report,
//! writes machine-readable artifacts under its output directory, and embeds
//! the fully resolved configuration in every file header.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use gfl_core::checkpoint::{load_checkpoint, save_checkpoint};
use gfl_core::graph::SimilarityMethod;
use gfl_core::metrics::MetricsLog;
use gfl_core::models::encode;
use gfl_core::proto::DistanceKind;
use gfl_core::rng::Rng;
use gfl_core::taskgen::{generate_family, load_family, save_family, GraphFamily};
use gfl_core::tensor::op_gradcheck_suite;
use gfl_core::trainer::{
    evaluate, evaluate_with_baselines, gradcheck_full_objective, pretrain_autoencoder_encoder,
    sample_episode, train, EvalSummary, ModelParams, TrainConfig, TrainOutcome,
};

use crate::config::RunConfig;
use crate::table::Table;

/// Evaluation episodes are sampled from this dedicated stream so reports are
/// reproducible independently of training-time RNG consumption.
const EVAL_STREAM: u64 = 0xe7a1;

/// Steps for the k-NN baseline's reconstruction-only encoder pretraining.
const KNN_PRETRAIN_STEPS: usize = 300;

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let family = generate_family(&cfg.family)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_family(&family, out)?;
    println!("# config: {}", cfg.to_json());
    println!(
        "wrote {} ({} train / {} val / {} test graphs, {} classes)",
        out.display(),
        family.train.len(),
        family.val.len(),
        family.test.len(),
        cfg.family.classes
    );
    Ok(())
}

fn load_family_checked(path: &Path) -> Result<GraphFamily> {
    load_family(path).with_context(|| format!("loading graph family from {}", path.display()))
}

/// One training run over a family: returns the outcome and its metrics log.
/// Every command that trains goes through here, so `train`, `ablate` and
/// `sweep` share one code path by construction.
pub fn run_training(family: &GraphFamily, cfg: &RunConfig) -> Result<(TrainOutcome, MetricsLog)> {
    let outcome = train(&family.train, &family.val, &cfg.train)?;
    let log = MetricsLog::new(cfg.to_json(), outcome.history.clone());
    Ok((outcome, log))
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub best_val_accuracy: Option<f64>,
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<TrainArtifacts> {
    let family = load_family_checked(data)?;
    std::fs::create_dir_all(out_dir)?;
    let (outcome, log) = run_training(&family, cfg)?;

    let metrics = out_dir.join("metrics.jsonl");
    log.write(&metrics)?;
    let checkpoint = out_dir.join("model.ckpt");
    let named = outcome.params.named();
    save_checkpoint(&checkpoint, &named)?;

    println!("# config: {}", cfg.to_json());
    let last = outcome.history.last().expect("at least one step");
    println!(
        "trained {} steps: loss {:.4}, reconstruction {:.4}",
        last.step, last.loss, last.rec_loss
    );
    match outcome.best_val_accuracy {
        Some(acc) => println!(
            "best validation accuracy {:.4} at step {} (checkpoint keeps that state)",
            acc, outcome.best_step
        ),
        None => println!("no validation split evaluated; checkpoint keeps the final state"),
    }
    println!("wrote {} and {}", checkpoint.display(), metrics.display());
    Ok(TrainArtifacts {
        checkpoint,
        metrics,
        best_val_accuracy: outcome.best_val_accuracy,
    })
}

fn load_params(cfg: &RunConfig, family: &GraphFamily, checkpoint: &Path) -> Result<ModelParams> {
    let entries = load_checkpoint(checkpoint)?;
    let feature_dim = family.config.feature_dim;
    Ok(ModelParams::from_named(feature_dim, &cfg.train, &entries)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub model: EvalSummary,
    pub label_prop: Option<EvalSummary>,
    pub knn: Option<EvalSummary>,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    with_baselines: bool,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let family = load_family_checked(data)?;
    let params = load_params(cfg, &family, checkpoint)?;
    let mut rng = Rng::new(cfg.train.seed).derive(EVAL_STREAM);

    let report = if with_baselines {
        let knn_encoder =
            pretrain_autoencoder_encoder(&family.train, &cfg.train, KNN_PRETRAIN_STEPS)?;
        let cmp = evaluate_with_baselines(
            &family.test,
            &params,
            &knn_encoder,
            &cfg.train,
            cfg.train.eval_episodes,
            &mut rng,
        )?;
        EvalReport {
            model: cmp.model,
            label_prop: Some(cmp.label_prop),
            knn: Some(cmp.knn),
        }
    } else {
        let summary = evaluate(
            &family.test,
            &params,
            &cfg.train,
            cfg.train.eval_episodes,
            &mut rng,
        )?;
        EvalReport {
            model: summary,
            label_prop: None,
            knn: None,
        }
    };

    println!("# config: {}", cfg.to_json());
    let mut table = Table::new(&["method", "accuracy", "ci95", "episodes"]);
    let mut push = |name: &str, s: &EvalSummary| {
        table.row(vec![
            name.to_string(),
            format!("{:.4}", s.mean_accuracy),
            format!("{:.4}", s.ci95),
            s.episodes.to_string(),
        ]);
    };
    push("model", &report.model);
    if let Some(lp) = &report.label_prop {
        push("label-prop", lp);
    }
    if let Some(knn) = &report.knn {
        push("knn", knn);
    }
    print!("{}", table.render());

    if let Some(path) = out {
        write_jsonl(path, cfg, |w| {
            w.push(serde_json::json!({"type": "eval", "report": &report}));
        })?;
        println!("wrote {}", path.display());
    }
    Ok(report)
}

fn write_jsonl(
    path: &Path,
    cfg: &RunConfig,
    fill: impl FnOnce(&mut Vec<serde_json::Value>),
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut lines = vec![serde_json::json!({"type": "header", "config": cfg.to_json()})];
    fill(&mut lines);
    let mut text = String::new();
    for line in lines {
        text.push_str(&line.to_string());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Named model variants of the ablation study.
pub const ABLATION_VARIANTS: [&str; 5] = ["gfl", "m1a", "m2a", "m2b", "m3"];

pub fn variant_config(base: &RunConfig, variant: &str) -> RunConfig {
    let mut cfg = base.clone();
    match variant {
        "gfl" => {}
        "m1a" => cfg.train.mean_prototype = true,
        "m2a" => cfg.train.no_gate = true,
        "m2b" => cfg.train.flat_hierarchy = true,
        "m3" => cfg.train.no_reconstruction = true,
        other => panic!("unknown ablation variant {other}"),
    }
    cfg
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub summary: EvalSummary,
    pub per_seed_mean: Vec<f64>,
}

/// Trains and evaluates one configuration across seeds, pooling episode
/// accuracies. Writes per-seed metrics logs when `metrics_dir` is given.
pub fn train_eval_across_seeds(
    base: &RunConfig,
    name: &str,
    seeds: &[u64],
    family: &GraphFamily,
    metrics_dir: Option<&Path>,
) -> Result<VariantResult> {
    let mut pooled = Vec::new();
    let mut per_seed_mean = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        let (outcome, log) = run_training(family, &cfg)?;
        if let Some(dir) = metrics_dir {
            std::fs::create_dir_all(dir)?;
            log.write(&dir.join(format!("metrics_{name}_seed{seed}.jsonl")))?;
        }
        let mut rng = Rng::new(seed).derive(EVAL_STREAM);
        let summary = evaluate(
            &family.test,
            &outcome.params,
            &cfg.train,
            cfg.train.eval_episodes,
            &mut rng,
        )?;
        per_seed_mean.push(summary.mean_accuracy);
        pooled.extend(summary.episode_accuracies);
    }
    Ok(VariantResult {
        name: name.to_string(),
        summary: EvalSummary::from_accuracies(&pooled),
        per_seed_mean,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<VariantResult>,
    pub baselines: Vec<VariantResult>,
}

/// Ablation study across the five model variants plus the label-propagation
/// and k-NN baselines (the latter on the autoencoder-pretrained encoder),
/// all evaluated on the same held-out graphs.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data: &Path,
    out_dir: &Path,
    seeds: &[u64],
) -> Result<AblationReport> {
    let family = load_family_checked(data)?;
    std::fs::create_dir_all(out_dir)?;
    let seeds = if seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        seeds.to_vec()
    };

    // The base variant's runs double as the anchor for the baselines, which
    // are scored on the very same evaluation episodes.
    let mut gfl_pool = Vec::new();
    let mut gfl_means = Vec::new();
    let mut lp_pool = Vec::new();
    let mut lp_means = Vec::new();
    let mut knn_pool = Vec::new();
    let mut knn_means = Vec::new();
    for &seed in &seeds {
        let mut vcfg = cfg.clone();
        vcfg.train.seed = seed;
        let (outcome, log) = run_training(&family, &vcfg)?;
        log.write(&out_dir.join(format!("metrics_gfl_seed{seed}.jsonl")))?;
        let knn_encoder =
            pretrain_autoencoder_encoder(&family.train, &vcfg.train, KNN_PRETRAIN_STEPS)?;
        let mut rng = Rng::new(seed).derive(EVAL_STREAM);
        let cmp = evaluate_with_baselines(
            &family.test,
            &outcome.params,
            &knn_encoder,
            &vcfg.train,
            vcfg.train.eval_episodes,
            &mut rng,
        )?;
        gfl_means.push(cmp.model.mean_accuracy);
        lp_means.push(cmp.label_prop.mean_accuracy);
        knn_means.push(cmp.knn.mean_accuracy);
        gfl_pool.extend(cmp.model.episode_accuracies);
        lp_pool.extend(cmp.label_prop.episode_accuracies);
        knn_pool.extend(cmp.knn.episode_accuracies);
    }
    let mut rows = vec![VariantResult {
        name: "gfl".into(),
        summary: EvalSummary::from_accuracies(&gfl_pool),
        per_seed_mean: gfl_means,
    }];
    for variant in ABLATION_VARIANTS.iter().skip(1) {
        let vcfg = variant_config(cfg, variant);
        rows.push(train_eval_across_seeds(
            &vcfg,
            variant,
            &seeds,
            &family,
            Some(out_dir),
        )?);
    }
    let baselines = vec![
        VariantResult {
            name: "label-prop".into(),
            summary: EvalSummary::from_accuracies(&lp_pool),
            per_seed_mean: lp_means,
        },
        VariantResult {
            name: "knn".into(),
            summary: EvalSummary::from_accuracies(&knn_pool),
            per_seed_mean: knn_means,
        },
    ];

    let report = AblationReport { rows, baselines };
    print_variant_table(cfg, &report.rows, &report.baselines);
    write_jsonl(&out_dir.join("ablation.jsonl"), cfg, |w| {
        for row in report.rows.iter().chain(&report.baselines) {
            w.push(serde_json::json!({"type": "row", "result": row}));
        }
    })?;
    println!("wrote {}", out_dir.join("ablation.jsonl").display());
    Ok(report)
}

fn print_variant_table(cfg: &RunConfig, rows: &[VariantResult], baselines: &[VariantResult]) {
    println!("# config: {}", cfg.to_json());
    let mut table = Table::new(&["variant", "accuracy", "ci95", "episodes", "per-seed"]);
    for row in rows.iter().chain(baselines) {
        table.row(vec![
            row.name.clone(),
            format!("{:.4}", row.summary.mean_accuracy),
            format!("{:.4}", row.summary.ci95),
            row.summary.episodes.to_string(),
            row.per_seed_mean
                .iter()
                .map(|a| format!("{a:.3}"))
                .collect::<Vec<_>>()
                .join("/"),
        ]);
    }
    print!("{}", table.render());
}

/// Sensitivity sweep axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Mu,
    Similarity,
    Distance,
    Shots,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mu" => Ok(SweepAxis::Mu),
            "similarity" => Ok(SweepAxis::Similarity),
            "distance" => Ok(SweepAxis::Distance),
            "shots" => Ok(SweepAxis::Shots),
            other => {
                bail!("unknown sweep axis '{other}' (expected mu | similarity | distance | shots)")
            }
        }
    }
}

/// Sweep settings per axis: threshold values, the four similarity functions,
/// both distance kinds, or the support-set sizes.
pub fn sweep_settings(axis: SweepAxis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    match axis {
        SweepAxis::Mu => [0.5, 0.6, 0.7, 0.8]
            .into_iter()
            .map(|mu| {
                let mut cfg = base.clone();
                cfg.train.similarity.mu = mu;
                (format!("mu={mu}"), cfg)
            })
            .collect(),
        SweepAxis::Similarity => SimilarityMethod::ALL
            .into_iter()
            .map(|m| {
                let mut cfg = base.clone();
                cfg.train.similarity.method = m;
                (m.name().to_string(), cfg)
            })
            .collect(),
        SweepAxis::Distance => [DistanceKind::InnerProduct, DistanceKind::Cosine]
            .into_iter()
            .map(|d| {
                let mut cfg = base.clone();
                cfg.train.distance = d;
                (d.name().to_string(), cfg)
            })
            .collect(),
        SweepAxis::Shots => [3usize, 5, 10]
            .into_iter()
            .map(|n| {
                let mut cfg = base.clone();
                cfg.train.shots = n;
                (format!("shots={n}"), cfg)
            })
            .collect(),
    }
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    data: &Path,
    axis: SweepAxis,
    out_dir: &Path,
    seeds: &[u64],
) -> Result<Vec<VariantResult>> {
    let family = load_family_checked(data)?;
    std::fs::create_dir_all(out_dir)?;
    let seeds = if seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        seeds.to_vec()
    };

    let mut rows = Vec::new();
    for (name, vcfg) in sweep_settings(axis, cfg) {
        rows.push(train_eval_across_seeds(
            &vcfg,
            &name,
            &seeds,
            &family,
            Some(out_dir),
        )?);
    }
    print_variant_table(cfg, &rows, &[]);
    write_jsonl(&out_dir.join("sweep.jsonl"), cfg, |w| {
        for row in &rows {
            w.push(serde_json::json!({"type": "row", "result": row}));
        }
    })?;
    println!("wrote {}", out_dir.join("sweep.jsonl").display());
    Ok(rows)
}

/// Gradient checks: the per-op finite-difference suite plus the full episodic
/// objective on a seeded 8-node, 2-class, 2-shot instance. Prints one line
/// per check and fails (nonzero exit) if any exceeds the tolerance.
pub fn cmd_gradcheck(tolerance: f64, workers: usize) -> Result<()> {
    let mut all_ok = true;
    for (name, err) in op_gradcheck_suite(1e-5, workers) {
        let ok = err < tolerance;
        all_ok &= ok;
        println!(
            "{:<16} {:>12.3e}  {}",
            name,
            err,
            if ok { "pass" } else { "FAIL" }
        );
    }

    let err = full_objective_check(workers)?;
    let ok = err < tolerance;
    all_ok &= ok;
    println!(
        "{:<16} {:>12.3e}  {}",
        "full-objective",
        err,
        if ok { "pass" } else { "FAIL" }
    );

    if !all_ok {
        bail!("gradient check failed (tolerance {tolerance})");
    }
    Ok(())
}

/// The seeded 8-node / 2-class / 2-shot instance used by the full-objective
/// gradient check.
pub fn full_objective_check(workers: usize) -> Result<f64> {
    use gfl_core::taskgen::FamilyConfig;
    let fam = FamilyConfig {
        classes: 2,
        nodes_per_class_min: 4,
        nodes_per_class_max: 4,
        p_in: 0.6,
        p_out: 0.15,
        feature_dim: 4,
        mean_separation: 1.0,
        feature_noise: 0.3,
        rotate_per_graph: false,
        train_graphs: 1,
        val_graphs: 1,
        test_graphs: 1,
        seed: 12,
    };
    let family = generate_family(&fam)?;
    let g = &family.train[0];
    let mut cfg = TrainConfig {
        shots: 2,
        ..TrainConfig::default()
    };
    cfg.hierarchy.community_counts = vec![4, 2];
    let mut rng = Rng::new(5);
    let params = ModelParams::init(g.feature_dim(), &cfg, &mut rng);
    let episode = sample_episode(g, 0, cfg.shots, 0, &mut Rng::new(6))?;
    Ok(gradcheck_full_objective(
        g, &episode, &params, &cfg, 1e-5, workers,
    ))
}

/// Per-node embedding CSV export: `node_id,label,e00..e31` for every graph of
/// the chosen split.
pub fn cmd_embed(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    split: &str,
) -> Result<Vec<PathBuf>> {
    let family = load_family_checked(data)?;
    let params = load_params(cfg, &family, checkpoint)?;
    std::fs::create_dir_all(out_dir)?;
    let graphs = match split {
        "train" => &family.train,
        "val" => &family.val,
        "test" => &family.test,
        other => bail!("unknown split '{other}' (expected train | val | test)"),
    };

    let mut written = Vec::new();
    for (gi, g) in graphs.iter().enumerate() {
        let z = encode(g, &params.encoder);
        let mut csv = String::new();
        csv.push_str("node_id,label");
        for j in 0..z.cols() {
            csv.push_str(&format!(",e{j:02}"));
        }
        csv.push('\n');
        for node in 0..g.n() {
            csv.push_str(&format!("{node},{}", g.label(node)));
            for &v in z.row(node) {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        let path = out_dir.join(format!("embed_{split}_{gi:03}.csv"));
        std::fs::write(&path, csv)?;
        written.push(path);
    }
    println!("# config: {}", cfg.to_json());
    println!(
        "wrote {} embedding files to {}",
        written.len(),
        out_dir.display()
    );
    Ok(written)
}
