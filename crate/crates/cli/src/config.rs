//! The run configuration: one JSON document, overridable from flags.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trer_core::baselines::AlphaQeConfig;
use trer_core::benchmark::{BenchmarkConfig, Method};
use trer_core::model::ModelConfig;
use trer_core::retrieval::EvalParams;
use trer_core::synthdata::{default_suite, WorldConfig};
use trer_core::training::TrainConfig;
use trer_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives world generation (when `worlds` is absent) and training.
    pub seed: u64,
    /// Sequences to generate; the built-in five-sequence suite if absent.
    pub worlds: Option<Vec<WorldConfig>>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalParams,
    pub recall_ns: Vec<usize>,
    pub alpha_qe: AlphaQeConfig,
    pub methods: Vec<Method>,
    pub holdout: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

/// Model used with the built-in suite: the paper architecture (one head,
/// one encoder) at the suite's descriptor width.
pub fn benchmark_model() -> ModelConfig {
    ModelConfig {
        d: WorldConfig::default().descriptor_dim,
        d_h: 2 * WorldConfig::default().descriptor_dim,
        ..ModelConfig::default()
    }
}

pub fn benchmark_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 10,
        ..TrainConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            worlds: None,
            model: benchmark_model(),
            train: benchmark_train(),
            eval: EvalParams::default(),
            recall_ns: vec![1, 5, 10],
            alpha_qe: AlphaQeConfig::default(),
            methods: Method::ALL.to_vec(),
            holdout: "s08".into(),
            data_dir: "data".into(),
            out_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn worlds(&self) -> Vec<WorldConfig> {
        self.worlds.clone().unwrap_or_else(|| default_suite(self.seed))
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            model: self.model.clone(),
            train: TrainConfig {
                seed: self.seed,
                ..self.train.clone()
            },
            eval: self.eval,
            recall_ns: self.recall_ns.clone(),
            alpha_qe: self.alpha_qe.clone(),
        }
    }

    /// Checks every part and their agreement; nothing is used unless all pass.
    pub fn validate(&self) -> Result<()> {
        self.benchmark().validate()?;
        let worlds = self.worlds();
        if worlds.is_empty() {
            return Err(Error::Config("no worlds configured".into()));
        }
        let mut ids = HashSet::new();
        for w in &worlds {
            w.validate(self.eval.k)?;
            if !ids.insert(w.sequence_id.as_str()) {
                return Err(Error::Config(format!("sequence id {} used twice", w.sequence_id)));
            }
            if w.descriptor_dim != self.model.d {
                return Err(Error::Config(format!(
                    "{} has descriptor_dim = {}, model has d = {}",
                    w.sequence_id, w.descriptor_dim, self.model.d
                )));
            }
        }
        if !ids.contains(self.holdout.as_str()) {
            return Err(Error::Config(format!(
                "holdout {} is not one of the configured sequences",
                self.holdout
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        Ok(())
    }
}
