//! Experiment configuration file (TOML).
//!
//! Relative paths are resolved against the directory holding the config
//! file, or the working directory when no file is given.

use std::path::{Path, PathBuf};

use hierlens_core::data::PairRules;
use hierlens_core::eval::EvalSettings;
use hierlens_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub annotations: PathBuf,
    pub pairs: PathBuf,
    pub pair_stats: PathBuf,
    pub nodes: PathBuf,
    pub tree: PathBuf,
    pub embeddings: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub report: PathBuf,
    pub pr_csv: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            annotations: "annotations.jsonl".into(),
            pairs: "pairs.tsv".into(),
            pair_stats: "pair_stats.json".into(),
            nodes: "nodes.tsv".into(),
            tree: "tree.json".into(),
            embeddings: "embeddings.bin".into(),
            checkpoint: "checkpoint.bin".into(),
            train_log: "train_log.csv".into(),
            report: "report.json".into(),
            pr_csv: "pr_curve.csv".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.annotations,
            &mut self.pairs,
            &mut self.pair_stats,
            &mut self.nodes,
            &mut self.tree,
            &mut self.embeddings,
            &mut self.checkpoint,
            &mut self.train_log,
            &mut self.report,
            &mut self.pr_csv,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Label-tree thresholds: an edge is kept when its frequency and
/// proportion both reach these values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeThresholds {
    pub min_frequency: usize,
    pub min_proportion: f64,
}

impl Default for TreeThresholds {
    fn default() -> Self {
        TreeThresholds {
            min_frequency: 50,
            min_proportion: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeSettings {
    pub host: String,
    pub port: u16,
    /// Allowed CORS origin; "*" allows any.
    pub cors_origin: String,
    pub default_k: usize,
    /// Angle threshold (radians) for requests that name none.
    pub default_threshold: f64,
}

impl Default for ServeSettings {
    fn default() -> Self {
        ServeSettings {
            host: "127.0.0.1".into(),
            port: 8080,
            cors_origin: "*".into(),
            default_k: 10,
            default_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub pairs: PairRules,
    pub tree: TreeThresholds,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub serve: ServeSettings,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let (mut config, base) = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
                let config: ExperimentConfig = toml::from_str(&text)
                    .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (config, base)
            }
            None => (ExperimentConfig::default(), PathBuf::new()),
        };
        config.paths.resolve(&base);
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(CliError::from)?;
        if self.eval.ks.contains(&0) || self.eval.large_ks.contains(&0) {
            return Err(CliError::usage("eval cutoffs must be positive"));
        }
        if self.serve.default_k == 0 {
            return Err(CliError::usage("serve.default_k must be positive"));
        }
        let t = self.serve.default_threshold;
        if !t.is_finite() || t < 0.0 {
            return Err(CliError::usage("serve.default_threshold must be a nonnegative angle"));
        }
        let t = self.pairs.containment_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(CliError::usage("containment_threshold must be in (0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_hyperparameters() {
        let c = ExperimentConfig::default();
        assert_eq!(c.pairs.containment_threshold, 0.8);
        assert_eq!(c.tree.min_frequency, 50);
        assert_eq!(c.tree.min_proportion, 0.10);
        assert_eq!(c.train.initial_tau, 0.07);
        assert_eq!(c.train.dim, 128);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c: ExperimentConfig = toml::from_str("[train]\ndim = 8\n[tree]\nmin_frequency = 2\n").unwrap();
        assert_eq!(c.train.dim, 8);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.tree.min_frequency, 2);
        assert_eq!(c.tree.min_proportion, 0.10);
    }

    #[test]
    fn mistyped_values_are_rejected() {
        let c: Result<ExperimentConfig, _> = toml::from_str("[train]\ndim = \"eight\"\n");
        assert!(c.is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("exp.toml");
        std::fs::write(&file, "[paths]\npairs = \"out/p.tsv\"\nnodes = \"/abs/nodes.tsv\"\n").unwrap();
        let c = ExperimentConfig::load(Some(&file)).unwrap();
        assert_eq!(c.paths.pairs, dir.path().join("out/p.tsv"));
        assert_eq!(c.paths.nodes, PathBuf::from("/abs/nodes.tsv"));
        assert_eq!(c.paths.tree, dir.path().join("tree.json"));
    }
}
