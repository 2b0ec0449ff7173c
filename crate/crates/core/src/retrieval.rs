//! Descriptor databases, exact kNN loop retrieval, ground-truth loop labels
//! and Recall@N evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{squared_distance, Mat};

/// Default loop threshold in meters.
pub const LOOP_THRESHOLD_M: f64 = 25.0;
/// Default temporal exclusion window in frames.
pub const EXCLUSION_WINDOW: u32 = 100;

pub type Pose = [f64; 3];

/// Poses, descriptors and frame ids of one sequence. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorDatabase {
    sequence_id: String,
    poses: Vec<Pose>,
    descriptors: Mat,
    frame_ids: Vec<u32>,
}

impl DescriptorDatabase {
    pub fn new(
        sequence_id: impl Into<String>,
        poses: Vec<Pose>,
        descriptors: Mat,
        frame_ids: Vec<u32>,
    ) -> Result<Self> {
        if poses.len() != descriptors.rows() || frame_ids.len() != poses.len() {
            return Err(Error::shape(
                "DescriptorDatabase::new",
                format!(
                    "{} poses, {} descriptors, {} frame ids",
                    poses.len(),
                    descriptors.rows(),
                    frame_ids.len()
                ),
            ));
        }
        if frame_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("frame ids must be strictly increasing".into()));
        }
        if poses.iter().flatten().any(|x| !x.is_finite()) || !descriptors.is_finite() {
            return Err(Error::Data("database contains non-finite values".into()));
        }
        Ok(Self {
            sequence_id: sequence_id.into(),
            poses,
            descriptors,
            frame_ids,
        })
    }

    pub fn sequence_id(&self) -> &str {
        &self.sequence_id
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn pose(&self, i: usize) -> Pose {
        self.poses[i]
    }

    pub fn descriptors(&self) -> &Mat {
        &self.descriptors
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        self.descriptors.row(i)
    }

    pub fn frame_ids(&self) -> &[u32] {
        &self.frame_ids
    }
}

/// A query frame together with its temporal exclusion window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoopQuery {
    pub index: usize,
    pub exclusion_window: u32,
}

impl LoopQuery {
    /// Frame ids the query may not match: itself, the preceding
    /// `exclusion_window` frames and everything after it. Only older places
    /// are in the database when a frame is observed.
    pub fn excluded_frames(&self, db: &DescriptorDatabase) -> RangeInclusive<u32> {
        let f = db.frame_ids()[self.index];
        f.saturating_sub(self.exclusion_window)..=u32::MAX
    }
}

/// Indices of the `k` database rows nearest to `query` in Euclidean
/// distance, ascending, skipping rows whose frame id lies in `exclude`.
/// Equal distances go to the lower index.
pub fn knn(
    db: &DescriptorDatabase,
    query: &[f64],
    k: usize,
    exclude: Option<&RangeInclusive<u32>>,
) -> Result<Vec<usize>> {
    if query.len() != db.dim() {
        return Err(Error::shape(
            "knn",
            format!("query has {} features, database {}", query.len(), db.dim()),
        ));
    }
    let mut scored: Vec<(f64, usize)> = db
        .frame_ids()
        .iter()
        .enumerate()
        .filter(|(_, f)| exclude.is_none_or(|r| !r.contains(f)))
        .map(|(i, _)| (squared_distance(query, db.descriptor(i)), i))
        .collect();
    if k > scored.len() {
        return Err(Error::Capacity {
            requested: k,
            available: scored.len(),
        });
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() && k > 0 {
        scored.select_nth_unstable_by(k - 1, cmp);
    }
    scored.truncate(k);
    scored.sort_unstable_by(cmp);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

pub fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    squared_distance(a, b).sqrt()
}

/// A candidate is a true loop when it lies strictly within `zeta` meters.
pub fn is_true_loop(query_pose: &Pose, candidate_pose: &Pose, zeta: f64) -> bool {
    pose_distance(query_pose, candidate_pose) < zeta
}

/// Fraction of loop-bearing queries with at least one true loop in the top
/// `n` of their ranking. Queries with an empty truth set are not counted.
pub fn recall_at(rankings: &[Vec<usize>], truth: &[HashSet<usize>], n: usize) -> Result<f64> {
    if rankings.len() != truth.len() {
        return Err(Error::shape(
            "recall_at",
            format!("{} rankings, {} truth sets", rankings.len(), truth.len()),
        ));
    }
    let mut counted = 0usize;
    let mut hits = 0usize;
    for (r, t) in rankings.iter().zip(truth) {
        if n == 0 || n > r.len() {
            return Err(Error::Parameter(format!(
                "N = {n} outside 1..={}",
                r.len()
            )));
        }
        if t.is_empty() {
            continue;
        }
        counted += 1;
        if r[..n].iter().any(|c| t.contains(c)) {
            hits += 1;
        }
    }
    Ok(if counted == 0 {
        0.0
    } else {
        hits as f64 / counted as f64
    })
}

/// What a re-ranker gets to see about the query besides its candidates.
pub struct QueryContext<'a> {
    pub db: &'a DescriptorDatabase,
    pub query: LoopQuery,
    pub descriptor: &'a [f64],
    pub pose: Pose,
}

impl QueryContext<'_> {
    pub fn excluded_frames(&self) -> RangeInclusive<u32> {
        self.query.excluded_frames(self.db)
    }
}

/// A re-ranking function over one query's candidate list.
pub trait Reranker {
    fn name(&self) -> &str;

    /// Candidate count the re-ranker is built for, if fixed.
    fn expected_k(&self) -> Option<usize> {
        None
    }

    /// Returns a new ranking. `descriptors` row `r` belongs to `candidates[r]`.
    fn rerank(
        &self,
        ctx: &QueryContext<'_>,
        candidates: &[usize],
        descriptors: &Mat,
    ) -> Result<Vec<usize>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub k: usize,
    /// Loop threshold in meters.
    pub zeta: f64,
    pub exclusion_window: u32,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            k: 25,
            zeta: LOOP_THRESHOLD_M,
            exclusion_window: EXCLUSION_WINDOW,
        }
    }
}

/// Raw retrieval for every query of a sequence that has at least `k`
/// eligible database frames.
#[derive(Clone, Debug)]
pub struct RetrievalSet {
    pub params: EvalParams,
    pub queries: Vec<LoopQuery>,
    pub candidates: Vec<Vec<usize>>,
    /// True loops among all eligible database frames, per query.
    pub truth: Vec<HashSet<usize>>,
}

impl RetrievalSet {
    pub fn build(db: &DescriptorDatabase, params: EvalParams) -> Result<Self> {
        if params.k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        let mut out = Self {
            params,
            queries: Vec::new(),
            candidates: Vec::new(),
            truth: Vec::new(),
        };
        for index in 0..db.len() {
            let q = LoopQuery {
                index,
                exclusion_window: params.exclusion_window,
            };
            let excl = q.excluded_frames(db);
            let eligible: Vec<usize> = (0..db.len())
                .filter(|&i| !excl.contains(&db.frame_ids()[i]))
                .collect();
            if eligible.len() < params.k {
                continue;
            }
            let cands = knn(db, db.descriptor(index), params.k, Some(&excl))?;
            let qp = db.pose(index);
            let truth = eligible
                .into_iter()
                .filter(|&i| is_true_loop(&qp, &db.pose(i), params.zeta))
                .collect();
            out.queries.push(q);
            out.candidates.push(cands);
            out.truth.push(truth);
        }
        Ok(out)
    }

    /// Queries with at least one true loop in the database.
    pub fn loop_query_count(&self) -> usize {
        self.truth.iter().filter(|t| !t.is_empty()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub std_s: f64,
    pub samples: usize,
}

impl LatencyStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean_s: 0.0,
                std_s: 0.0,
                samples: 0,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean_s: mean,
            std_s: var.sqrt(),
            samples: n,
        }
    }
}

/// Recall table for one (sequence, method) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub sequence: String,
    pub method: String,
    pub query_count: usize,
    /// Headline `(N, Recall@N)` pairs.
    pub recall: Vec<(usize, f64)>,
    /// Recall@N for N = 1..=k.
    pub curve: Vec<f64>,
    pub latency: LatencyStats,
}

impl RecallReport {
    /// Recall@n from the full curve.
    pub fn at(&self, n: usize) -> f64 {
        self.curve[n - 1]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const CSV_HEADER: &str = "sequence,method,N,recall";

/// CSV rows (no latency) for the headline N values of each report.
pub fn reports_to_csv(reports: &[RecallReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        for (n, v) in &r.recall {
            let _ = writeln!(s, "{},{},{},{:.6}", r.sequence, r.method, n, v);
        }
    }
    s
}

/// Applies `reranker` to every loop-bearing query of a prepared retrieval
/// set and scores the result.
pub fn evaluate_retrieval(
    db: &DescriptorDatabase,
    set: &RetrievalSet,
    reranker: &dyn Reranker,
    ns: &[usize],
) -> Result<RecallReport> {
    let k = set.params.k;
    if let Some(rk) = reranker.expected_k() {
        if rk != k {
            return Err(Error::Config(format!(
                "re-ranker {} is built for k = {rk}, evaluation uses k = {k}",
                reranker.name()
            )));
        }
    }
    if let Some(&bad) = ns.iter().find(|&&n| n == 0 || n > k) {
        return Err(Error::Parameter(format!("N = {bad} outside 1..={k}")));
    }

    let mut rankings = Vec::new();
    let mut truth = Vec::new();
    let mut latency = Vec::new();
    for ((q, cands), t) in set.queries.iter().zip(&set.candidates).zip(&set.truth) {
        if t.is_empty() {
            continue;
        }
        let descs = db.descriptors().select_rows(cands);
        let ctx = QueryContext {
            db,
            query: *q,
            descriptor: db.descriptor(q.index),
            pose: db.pose(q.index),
        };
        let start = Instant::now();
        let ranked = reranker.rerank(&ctx, cands, &descs)?;
        latency.push(start.elapsed().as_secs_f64());
        if ranked.len() != k {
            return Err(Error::Contract(format!(
                "re-ranker {} returned {} candidates for k = {k}",
                reranker.name(),
                ranked.len()
            )));
        }
        rankings.push(ranked);
        truth.push(t.clone());
    }

    let curve = (1..=k)
        .map(|n| recall_at(&rankings, &truth, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecallReport {
        sequence: db.sequence_id().to_string(),
        method: reranker.name().to_string(),
        query_count: rankings.len(),
        recall: ns.iter().map(|&n| (n, curve[n - 1])).collect(),
        curve,
        latency: LatencyStats::from_samples(&latency),
    })
}

/// Retrieves `k` candidates for every eligible query, re-ranks them and
/// reports Recall@N.
pub fn evaluate(
    db: &DescriptorDatabase,
    reranker: &dyn Reranker,
    params: EvalParams,
    ns: &[usize],
) -> Result<RecallReport> {
    let set = RetrievalSet::build(db, params)?;
    evaluate_retrieval(db, &set, reranker, ns)
}
