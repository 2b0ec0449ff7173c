//! The TReR re-ranker and leave-one-sequence-out benchmarking.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::baselines::{AlphaQe, AlphaQeConfig, Identity, Oracle};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelWeights};
use crate::numkit::Mat;
use crate::retrieval::{
    evaluate_retrieval, DescriptorDatabase, EvalParams, QueryContext, RecallReport, Reranker,
    RetrievalSet,
};
use crate::training::{samples_from_retrieval, train, RankingSample, TrainConfig, TrainingLog};

/// A trained model used as a re-ranker.
#[derive(Clone, Debug)]
pub struct Trer {
    pub cfg: ModelConfig,
    pub weights: ModelWeights,
}

impl Trer {
    pub fn new(cfg: ModelConfig, weights: ModelWeights) -> Result<Self> {
        cfg.validate()?;
        weights.check_shapes(&cfg)?;
        Ok(Self { cfg, weights })
    }
}

impl Reranker for Trer {
    fn name(&self) -> &str {
        "trer"
    }

    fn expected_k(&self) -> Option<usize> {
        Some(self.cfg.k)
    }

    fn rerank(
        &self,
        ctx: &QueryContext<'_>,
        candidates: &[usize],
        descriptors: &Mat,
    ) -> Result<Vec<usize>> {
        let input = model::model_input(&self.cfg, ctx.descriptor, descriptors)?;
        Ok(model::rerank(&self.cfg, &self.weights, candidates, &input)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    None,
    Trer,
    AlphaQe,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::Trer, Method::AlphaQe, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Trer => "trer",
            Method::AlphaQe => "alpha-qe",
            Method::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown method {s:?}; expected one of none, trer, alpha-qe, oracle"
                ))
            })
    }
}

/// Everything one train-and-evaluate run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalParams,
    pub recall_ns: Vec<usize>,
    pub alpha_qe: AlphaQeConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalParams::default(),
            recall_ns: vec![1, 5, 10],
            alpha_qe: AlphaQeConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.k != self.eval.k {
            return Err(Error::Config(format!(
                "model k = {} but evaluation k = {}",
                self.model.k, self.eval.k
            )));
        }
        if let Some(&bad) = self.recall_ns.iter().find(|&&n| n == 0 || n > self.eval.k) {
            return Err(Error::Config(format!("recall N = {bad} outside 1..={}", self.eval.k)));
        }
        if self.alpha_qe.n_expand > self.eval.k {
            return Err(Error::Config(format!(
                "alpha_qe.n_expand = {} exceeds k = {}",
                self.alpha_qe.n_expand, self.eval.k
            )));
        }
        Ok(())
    }
}

/// Training samples from the loop-bearing queries of every given sequence.
pub fn training_samples(dbs: &[DescriptorDatabase], eval: EvalParams) -> Result<Vec<RankingSample>> {
    let mut all = Vec::new();
    for db in dbs {
        let set = RetrievalSet::build(db, eval)?;
        let s = samples_from_retrieval(db, &set)?;
        info!("{}: {} training queries", db.sequence_id(), s.len());
        all.extend(s);
    }
    Ok(all)
}

pub fn check_dims(cfg: &ModelConfig, dbs: &[&DescriptorDatabase]) -> Result<()> {
    for db in dbs {
        if db.dim() != cfg.d {
            return Err(Error::Config(format!(
                "{} has descriptors of dim {}, model expects d = {}",
                db.sequence_id(),
                db.dim(),
                cfg.d
            )));
        }
    }
    Ok(())
}

pub fn train_on(
    dbs: &[DescriptorDatabase],
    cfg: &BenchmarkConfig,
) -> Result<(ModelWeights, TrainingLog)> {
    cfg.validate()?;
    check_dims(&cfg.model, &dbs.iter().collect::<Vec<_>>())?;
    let samples = training_samples(dbs, cfg.eval)?;
    train(&samples, &cfg.train, &cfg.model)
}

/// Evaluates the requested methods on one sequence. `weights` is needed
/// only when `methods` contains [`Method::Trer`].
pub fn evaluate_methods(
    db: &DescriptorDatabase,
    methods: &[Method],
    weights: Option<&ModelWeights>,
    cfg: &BenchmarkConfig,
) -> Result<Vec<RecallReport>> {
    cfg.validate()?;
    let set = RetrievalSet::build(db, cfg.eval)?;
    let mut reports = Vec::with_capacity(methods.len());
    for &m in methods {
        let start = Instant::now();
        let report = match m {
            Method::None => evaluate_retrieval(db, &set, &Identity, &cfg.recall_ns)?,
            Method::Oracle => evaluate_retrieval(db, &set, &Oracle, &cfg.recall_ns)?,
            Method::AlphaQe => evaluate_retrieval(
                db,
                &set,
                &AlphaQe {
                    cfg: cfg.alpha_qe.clone(),
                },
                &cfg.recall_ns,
            )?,
            Method::Trer => {
                let w = weights.ok_or_else(|| {
                    Error::Parameter("method trer needs a weights file".into())
                })?;
                check_dims(&cfg.model, &[db])?;
                let trer = Trer::new(cfg.model.clone(), w.clone())?;
                evaluate_retrieval(db, &set, &trer, &cfg.recall_ns)?
            }
        };
        info!(
            "{} {}: {:?} over {} queries in {:.1}s",
            db.sequence_id(),
            m.name(),
            report.recall,
            report.query_count,
            start.elapsed().as_secs_f64()
        );
        reports.push(report);
    }
    Ok(reports)
}

/// One held-out sequence: the model trained on the others and its reports.
#[derive(Clone, Debug)]
pub struct FoldResult {
    pub holdout: String,
    pub training_queries: usize,
    pub log: TrainingLog,
    pub weights: ModelWeights,
    pub reports: Vec<RecallReport>,
}

impl FoldResult {
    pub fn report(&self, method: Method) -> Option<&RecallReport> {
        self.reports.iter().find(|r| r.method == method.name())
    }
}

/// Trains on all sequences but `holdout` and evaluates every method on it.
pub fn run_fold(
    dbs: &[DescriptorDatabase],
    holdout: &str,
    cfg: &BenchmarkConfig,
) -> Result<FoldResult> {
    let test = dbs
        .iter()
        .find(|db| db.sequence_id() == holdout)
        .ok_or_else(|| Error::Parameter(format!("holdout sequence {holdout:?} is not in the input")))?;
    let train_dbs: Vec<DescriptorDatabase> = dbs
        .iter()
        .filter(|db| db.sequence_id() != holdout)
        .cloned()
        .collect();
    cfg.validate()?;
    check_dims(&cfg.model, &dbs.iter().collect::<Vec<_>>())?;
    let samples = training_samples(&train_dbs, cfg.eval)?;
    let start = Instant::now();
    let (weights, log) = train(&samples, &cfg.train, &cfg.model)?;
    info!(
        "holdout {holdout}: trained on {} queries in {:.1}s",
        samples.len(),
        start.elapsed().as_secs_f64()
    );
    let reports = evaluate_methods(test, &Method::ALL, Some(&weights), cfg)?;
    Ok(FoldResult {
        holdout: holdout.to_string(),
        training_queries: samples.len(),
        log,
        weights,
        reports,
    })
}

/// Leave-one-sequence-out over every sequence.
pub fn cross_validate(dbs: &[DescriptorDatabase], cfg: &BenchmarkConfig) -> Result<Vec<FoldResult>> {
    dbs.iter()
        .map(|db| run_fold(dbs, db.sequence_id(), cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_world, WorldConfig};

    fn tiny_bench() -> (Vec<DescriptorDatabase>, BenchmarkConfig) {
        let dbs: Vec<_> = ["a", "b"]
            .iter()
            .enumerate()
            .map(|(i, id)| {
                generate_world(&WorldConfig {
                    sequence_id: (*id).into(),
                    n_frames: 400,
                    descriptor_dim: 8,
                    noise_sigma: 0.1,
                    seed: i as u64,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect();
        let cfg = BenchmarkConfig {
            model: ModelConfig {
                d: 8,
                k: 5,
                d_h: 8,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 2,
                ..Default::default()
            },
            eval: EvalParams {
                k: 5,
                ..Default::default()
            },
            recall_ns: vec![1, 5],
            alpha_qe: AlphaQeConfig {
                n_expand: 3,
                ..Default::default()
            },
        };
        (dbs, cfg)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("sgv").is_err());
    }

    #[test]
    fn fold_reports_every_method() {
        let (dbs, cfg) = tiny_bench();
        let fold = run_fold(&dbs, "b", &cfg).unwrap();
        assert_eq!(fold.reports.len(), 4);
        assert_eq!(fold.log.epochs.len(), 2);
        let none = fold.report(Method::None).unwrap();
        let oracle = fold.report(Method::Oracle).unwrap();
        for (a, b) in none.recall.iter().zip(&oracle.recall) {
            assert!(b.1 >= a.1);
        }
        // re-ranking only permutes the candidate list
        for r in &fold.reports {
            assert_eq!(r.at(5), none.at(5), "{}", r.method);
        }
    }

    #[test]
    fn dimension_and_k_mismatches_are_config_errors() {
        let (dbs, mut cfg) = tiny_bench();
        cfg.model.d = 4;
        assert!(matches!(run_fold(&dbs, "a", &cfg), Err(Error::Config(_))));
        cfg.model.d = 8;
        cfg.eval.k = 6;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let (dbs, cfg) = tiny_bench();
        assert!(matches!(
            evaluate_methods(&dbs[0], &[Method::Trer], None, &cfg),
            Err(Error::Parameter(_))
        ));
    }
}
