//! Run configuration: a flat key-value text file plus command-line overrides.
//!
//! Key names are dotted paths (`family.classes`, `train.alpha`, `model.mu`).
//! Unknown keys are rejected with the offending name. Every default equals
//! the corresponding library default, and the fully resolved configuration is
//! embedded in every output header, so a run can be reproduced from its own
//! artifacts.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use gfl_core::graph::{SimilarityConfig, SimilarityMethod};
use gfl_core::hierarchy::{Aggregator, HierarchyConfig};
use gfl_core::proto::{DistanceKind, PoolKind};
use gfl_core::taskgen::FamilyConfig;
use gfl_core::trainer::{HierarchyInputs, OptimizerKind, TrainConfig};

/// Everything a run needs: the synthetic family and the training setup.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub family: FamilyConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Loads a config file and applies `key=value` overrides on top.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in config file {}", path.display()))?;
        }
        for entry in overrides {
            let (key, value) = entry
                .split_once('=')
                .ok_or_else(|| anyhow!("override '{entry}' is not of the form key=value"))?;
            cfg.apply(key.trim(), value.trim())
                .with_context(|| format!("in override '{entry}'"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                anyhow!(
                    "line {}: '{raw}' is not of the form key = value",
                    line_no + 1
                )
            })?;
            self.apply(key.trim(), value.trim())
                .with_context(|| format!("line {}", line_no + 1))?;
        }
        Ok(())
    }

    /// Sets one configuration key. Unknown keys are an error naming the key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| anyhow!("key '{key}': bad value '{value}' ({e})"))
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => bail!("key '{key}': bad boolean '{value}'"),
            }
        }

        match key {
            "family.classes" => self.family.classes = parse(key, value)?,
            "family.nodes_per_class_min" => self.family.nodes_per_class_min = parse(key, value)?,
            "family.nodes_per_class_max" => self.family.nodes_per_class_max = parse(key, value)?,
            "family.p_in" => self.family.p_in = parse(key, value)?,
            "family.p_out" => self.family.p_out = parse(key, value)?,
            "family.feature_dim" => self.family.feature_dim = parse(key, value)?,
            "family.mean_separation" => self.family.mean_separation = parse(key, value)?,
            "family.feature_noise" => self.family.feature_noise = parse(key, value)?,
            "family.rotate_per_graph" => self.family.rotate_per_graph = parse_bool(key, value)?,
            "family.train_graphs" => self.family.train_graphs = parse(key, value)?,
            "family.val_graphs" => self.family.val_graphs = parse(key, value)?,
            "family.test_graphs" => self.family.test_graphs = parse(key, value)?,
            "family.seed" => self.family.seed = parse(key, value)?,

            "train.alpha" => self.train.alpha = parse(key, value)?,
            "train.gamma" => self.train.gamma = parse(key, value)?,
            "train.shots" => self.train.shots = parse(key, value)?,
            "train.batch_graphs" => self.train.batch_graphs = parse(key, value)?,
            "train.steps" => self.train.steps = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.optimizer" => self.train.optimizer = OptimizerKind::parse(value)?,
            "train.val_interval" => self.train.val_interval = parse(key, value)?,
            "train.max_query_per_class" => self.train.max_query_per_class = parse(key, value)?,
            "train.workers" => self.train.workers = parse(key, value)?,

            "model.mean_prototype" => self.train.mean_prototype = parse_bool(key, value)?,
            "model.no_gate" => self.train.no_gate = parse_bool(key, value)?,
            "model.flat_hierarchy" => self.train.flat_hierarchy = parse_bool(key, value)?,
            "model.no_reconstruction" => self.train.no_reconstruction = parse_bool(key, value)?,
            "model.similarity" => self.train.similarity.method = SimilarityMethod::parse(value)?,
            "model.hop_k" => self.train.similarity.hop_k = parse(key, value)?,
            "model.top_k" => self.train.similarity.top_k = parse(key, value)?,
            "model.mu" => self.train.similarity.mu = parse(key, value)?,
            "model.mu0" => self.train.similarity.mu0 = parse(key, value)?,
            "model.distance" => self.train.distance = DistanceKind::parse(value)?,
            "model.aggregator" => self.train.hierarchy.aggregator = Aggregator::parse(value)?,
            "model.pool" => self.train.pool = PoolKind::parse(value)?,
            "model.hierarchy_levels" => {
                self.train.hierarchy.levels = parse(key, value)?;
            }
            "model.community_counts" => {
                self.train.hierarchy.community_counts = value
                    .split(',')
                    .map(|v| parse::<usize>(key, v.trim()))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "model.hierarchy_inputs" => {
                self.train.hierarchy_inputs = HierarchyInputs::parse(value)?
            }

            "eval.episodes_per_graph" => self.train.eval_episodes = parse(key, value)?,
            "eval.knn_k" => self.train.knn_k = parse(key, value)?,

            other => bail!("unknown configuration key '{other}'"),
        }
        Ok(())
    }

    /// Resolved configuration as a JSON value for output headers.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Convenience used by sweep/ablate variants.
pub fn with_similarity(mut cfg: RunConfig, sim: SimilarityConfig) -> RunConfig {
    cfg.train.similarity = sim;
    cfg
}

/// Default hierarchy shape, re-exported for help text.
pub fn default_hierarchy() -> HierarchyConfig {
    HierarchyConfig::default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library_defaults() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg.family, FamilyConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("train.alhpa", "0.1").unwrap_err();
        assert!(err.to_string().contains("train.alhpa"), "{err}");
    }

    #[test]
    fn file_text_with_comments_parses() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# experiment setup\n\
             family.classes = 3\n\
             train.alpha = 0.02   # hotter\n\
             model.similarity = jaccard\n\
             model.community_counts = 6, 2\n",
        )
        .unwrap();
        assert_eq!(cfg.family.classes, 3);
        assert_eq!(cfg.train.alpha, 0.02);
        assert_eq!(cfg.train.similarity.method, SimilarityMethod::Jaccard);
        assert_eq!(cfg.train.hierarchy.community_counts, vec![6, 2]);
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = RunConfig::resolve(
            None,
            &["train.shots=5".into(), "model.distance=cosine".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.shots, 5);
        assert_eq!(cfg.train.distance, DistanceKind::Cosine);
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("train.alpha", "fast").unwrap_err();
        assert!(err.to_string().contains("train.alpha"), "{err}");
        let err = cfg.apply("model.no_gate", "maybe").unwrap_err();
        assert!(err.to_string().contains("model.no_gate"), "{err}");
    }

    #[test]
    fn invalid_combination_fails_validation() {
        let r = RunConfig::resolve(None, &["model.mu0=0.9".into()]);
        assert!(r.is_err(), "mu0 above mu must fail validation");
    }
}
