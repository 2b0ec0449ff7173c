//! Non-learned re-rankers: alpha query expansion, identity, and a
//! ground-truth oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, l2_norm, squared_distance, Mat};
use crate::retrieval::{knn, pose_distance, Pose, QueryContext, Reranker};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaQeConfig {
    /// Exponent applied to the clamped cosine similarity of each neighbour.
    pub alpha: f64,
    /// Number of top candidates folded into the expanded query.
    pub n_expand: usize,
    /// L2-normalise query, candidates and the expanded query.
    pub normalize: bool,
    /// Re-query the whole database with the expanded query instead of
    /// re-sorting the original candidates.
    pub full_requery: bool,
}

impl Default for AlphaQeConfig {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            n_expand: 10,
            normalize: true,
            full_requery: false,
        }
    }
}

fn unit(v: &[f64], what: impl FnOnce() -> String) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if n == 0.0 {
        return Err(Error::Numeric(format!("{} has zero norm", what())));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// The expanded query `q' = q + sum_i sim(q, d_i)^alpha * d_i` over the
/// first `n_expand` rows of `descriptors`, normalised when configured.
pub fn expanded_query(query: &[f64], descriptors: &Mat, cfg: &AlphaQeConfig) -> Result<Vec<f64>> {
    if query.len() != descriptors.cols() {
        return Err(Error::shape(
            "alpha_qe",
            format!(
                "query has {} features, candidates {}",
                query.len(),
                descriptors.cols()
            ),
        ));
    }
    if cfg.n_expand > descriptors.rows() {
        return Err(Error::Parameter(format!(
            "n_expand = {} exceeds {} candidates",
            cfg.n_expand,
            descriptors.rows()
        )));
    }
    let q = if cfg.normalize {
        unit(query, || "query descriptor".into())?
    } else {
        query.to_vec()
    };
    let mut expanded = q.clone();
    for r in 0..cfg.n_expand {
        let d = if cfg.normalize {
            unit(descriptors.row(r), || format!("candidate row {r}"))?
        } else {
            descriptors.row(r).to_vec()
        };
        let weight = cosine(&q, &d).clamp(0.0, 1.0).powf(cfg.alpha);
        for (e, x) in expanded.iter_mut().zip(&d) {
            *e += weight * x;
        }
    }
    if cfg.normalize {
        expanded = unit(&expanded, || "expanded query".into())?;
    }
    Ok(expanded)
}

/// Re-sorts the candidates by ascending distance to the expanded query.
/// Ties keep the original order.
pub fn alpha_qe_rerank(
    query: &[f64],
    candidates: &[usize],
    descriptors: &Mat,
    cfg: &AlphaQeConfig,
) -> Result<Vec<usize>> {
    if candidates.len() != descriptors.rows() {
        return Err(Error::shape(
            "alpha_qe_rerank",
            format!(
                "{} candidates, {} descriptor rows",
                candidates.len(),
                descriptors.rows()
            ),
        ));
    }
    let expanded = expanded_query(query, descriptors, cfg)?;
    let mut dist = Vec::with_capacity(candidates.len());
    for r in 0..descriptors.rows() {
        let row = descriptors.row(r);
        let d = if cfg.normalize {
            squared_distance(&expanded, &unit(row, || format!("candidate row {r}"))?)
        } else {
            squared_distance(&expanded, row)
        };
        dist.push(d);
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    Ok(order.into_iter().map(|i| candidates[i]).collect())
}

pub fn identity_rerank(candidates: &[usize]) -> Vec<usize> {
    candidates.to_vec()
}

/// Sorts candidates by true distance to the query pose; ties keep order.
pub fn oracle_rerank(
    candidates: &[usize],
    query_pose: &Pose,
    candidate_poses: &[Option<Pose>],
) -> Result<Vec<usize>> {
    if candidates.len() != candidate_poses.len() {
        return Err(Error::shape(
            "oracle_rerank",
            format!("{} candidates, {} poses", candidates.len(), candidate_poses.len()),
        ));
    }
    let dist = candidate_poses
        .iter()
        .zip(candidates)
        .map(|(p, c)| {
            p.map(|p| pose_distance(query_pose, &p))
                .ok_or_else(|| Error::Data(format!("no pose for candidate {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    Ok(order.into_iter().map(|i| candidates[i]).collect())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Reranker for Identity {
    fn name(&self) -> &str {
        "none"
    }

    fn rerank(&self, _: &QueryContext<'_>, candidates: &[usize], _: &Mat) -> Result<Vec<usize>> {
        Ok(identity_rerank(candidates))
    }
}

#[derive(Clone, Debug, Default)]
pub struct AlphaQe {
    pub cfg: AlphaQeConfig,
}

impl Reranker for AlphaQe {
    fn name(&self) -> &str {
        "alpha-qe"
    }

    fn rerank(
        &self,
        ctx: &QueryContext<'_>,
        candidates: &[usize],
        descriptors: &Mat,
    ) -> Result<Vec<usize>> {
        if !self.cfg.full_requery {
            return alpha_qe_rerank(ctx.descriptor, candidates, descriptors, &self.cfg);
        }
        let expanded = expanded_query(ctx.descriptor, descriptors, &self.cfg)?;
        knn(ctx.db, &expanded, candidates.len(), Some(&ctx.excluded_frames()))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Oracle;

impl Reranker for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn rerank(&self, ctx: &QueryContext<'_>, candidates: &[usize], _: &Mat) -> Result<Vec<usize>> {
        let poses: Vec<Option<Pose>> = candidates
            .iter()
            .map(|&c| ctx.db.poses().get(c).copied())
            .collect();
        oracle_rerank(candidates, &ctx.pose, &poses)
    }
}
