use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use trer_core::benchmark::{evaluate_methods, run_fold, train_on, Method};
use trer_core::model::{self, load_weights_for, save_weights};
use trer_core::retrieval::{
    knn, pose_distance, reports_to_csv, DescriptorDatabase, LoopQuery, RecallReport,
};
use trer_core::synthdata::{generate_world, load_dataset, save_dataset};
use trer_core::{Error, Result};

use crate::config::RunConfig;
use crate::verify::{self, VerifyHooks};

pub const WEIGHTS_FILE: &str = "weights.trrw";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const RECALL_CSV: &str = "recall.csv";
pub const RECALL_JSON: &str = "recall.json";

pub fn dataset_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.trrd"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes one dataset file per configured sequence into `out_dir`.
pub fn generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut written = Vec::new();
    for w in cfg.worlds() {
        let db = generate_world(&w)?;
        let path = dataset_path(&cfg.out_dir, &w.sequence_id);
        save_dataset(&db, &path)?;
        info!("wrote {} ({} frames)", path.display(), db.len());
        written.push(path);
    }
    Ok(written)
}

fn load_sequences(cfg: &RunConfig) -> Result<Vec<DescriptorDatabase>> {
    cfg.worlds()
        .iter()
        .map(|w| {
            let db = load_dataset(dataset_path(&cfg.data_dir, &w.sequence_id))?;
            if db.sequence_id() != w.sequence_id {
                return Err(Error::Data(format!(
                    "file for {} holds sequence {}",
                    w.sequence_id,
                    db.sequence_id()
                )));
            }
            Ok(db)
        })
        .collect()
}

/// Trains on every configured sequence except the holdout; writes the
/// weights file and a JSON-lines loss history into `out_dir`.
pub fn train(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let train_dbs: Vec<_> = load_sequences(cfg)?
        .into_iter()
        .filter(|db| db.sequence_id() != cfg.holdout)
        .collect();
    let bench = cfg.benchmark();
    let (weights, log) = train_on(&train_dbs, &bench)?;
    let wpath = cfg.out_dir.join(WEIGHTS_FILE);
    let lpath = cfg.out_dir.join(TRAIN_LOG_FILE);
    fs::create_dir_all(&cfg.out_dir)?;
    save_weights(&bench.model, &weights, &wpath)?;
    write_file(&lpath, log.to_json_lines()?.as_bytes())?;
    info!("wrote {} and {}", wpath.display(), lpath.display());
    Ok((wpath, lpath))
}

/// Evaluates the configured methods on one dataset; writes CSV and JSON
/// reports into `out_dir`.
pub fn eval(cfg: &RunConfig, weights: &Path, dataset: &Path) -> Result<Vec<RecallReport>> {
    cfg.validate()?;
    let bench = cfg.benchmark();
    let db = load_dataset(dataset)?;
    let w = if cfg.methods.contains(&Method::Trer) {
        Some(load_weights_for(weights, &bench.model)?)
    } else {
        None
    };
    let reports = evaluate_methods(&db, &cfg.methods, w.as_ref(), &bench)?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(RECALL_CSV), reports_to_csv(&reports).as_bytes())?;
    write_file(
        &cfg.out_dir.join(RECALL_JSON),
        serde_json::to_string_pretty(&reports)?.as_bytes(),
    )?;
    Ok(reports)
}

#[derive(Debug, Serialize)]
pub struct RerankOutput {
    pub sequence: String,
    pub query: usize,
    pub candidates: Vec<usize>,
    pub reranked: Vec<usize>,
    pub scores: Vec<f64>,
    pub distances_m: Vec<f64>,
    pub seconds: f64,
}

/// Retrieves and re-ranks the candidates of a single query frame.
pub fn rerank(cfg: &RunConfig, weights: &Path, dataset: &Path, query: usize) -> Result<RerankOutput> {
    cfg.validate()?;
    let db = load_dataset(dataset)?;
    if query >= db.len() {
        return Err(Error::Parameter(format!(
            "query {query} out of range for {} frames",
            db.len()
        )));
    }
    let w = load_weights_for(weights, &cfg.model)?;
    let lq = LoopQuery {
        index: query,
        exclusion_window: cfg.eval.exclusion_window,
    };
    let candidates = knn(&db, db.descriptor(query), cfg.eval.k, Some(&lq.excluded_frames(&db)))?;
    let start = Instant::now();
    let input = model::model_input(
        &cfg.model,
        db.descriptor(query),
        &db.descriptors().select_rows(&candidates),
    )?;
    let (reranked, scores) = model::rerank(&cfg.model, &w, &candidates, &input)?;
    let seconds = start.elapsed().as_secs_f64();
    let qp = db.pose(query);
    Ok(RerankOutput {
        sequence: db.sequence_id().to_string(),
        query,
        distances_m: reranked.iter().map(|&c| pose_distance(&qp, &db.pose(c))).collect(),
        candidates,
        reranked,
        scores,
        seconds,
    })
}

/// Leave-one-sequence-out over every configured sequence. Writes one CSV
/// with a row per (holdout, method, N).
pub fn cross_validate(cfg: &RunConfig) -> Result<Vec<RecallReport>> {
    cfg.validate()?;
    let dbs = load_sequences(cfg)?;
    let bench = cfg.benchmark();
    let mut all = Vec::new();
    for db in &dbs {
        let fold = run_fold(&dbs, db.sequence_id(), &bench)?;
        all.extend(
            fold.reports
                .into_iter()
                .filter(|r| cfg.methods.iter().any(|m| m.name() == r.method)),
        );
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(RECALL_CSV), reports_to_csv(&all).as_bytes())?;
    write_file(
        &cfg.out_dir.join(RECALL_JSON),
        serde_json::to_string_pretty(&all)?.as_bytes(),
    )?;
    Ok(all)
}

/// Runs every verification suite and prints one JSON line per suite.
pub fn verify(hooks: &VerifyHooks, out: &mut dyn Write) -> Result<Vec<verify::SuiteResult>> {
    let results = verify::run_all(hooks);
    for r in &results {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(results)
}
