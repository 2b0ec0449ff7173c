//! Ranking samples, the pairwise logistic loss, AdamW and the training loop.

use std::f64::consts::LN_2;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelWeights};
use crate::numkit::Mat;
use crate::retrieval::{pose_distance, DescriptorDatabase, Pose, RetrievalSet};

/// One query with its retrieved candidates and ground-truth relevances.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingSample {
    pub query_id: usize,
    pub candidates: Vec<usize>,
    /// `k x d`, rows in retrieval order.
    pub descriptors: Mat,
    /// Negated pose distance per candidate: larger is more relevant.
    pub relevance: Vec<f64>,
    pub query_pose: Pose,
    pub query_descriptor: Vec<f64>,
}

/// Builds one sample per `(query, candidates)` pair. Queries with fewer than
/// `k` candidates are skipped; the second value is how many were.
pub fn build_training_set(
    db: &DescriptorDatabase,
    retrieved: &[(usize, Vec<usize>)],
    k: usize,
) -> Result<(Vec<RankingSample>, usize)> {
    let mut samples = Vec::with_capacity(retrieved.len());
    let mut skipped = 0;
    for (q, cands) in retrieved {
        if cands.len() < k {
            skipped += 1;
            continue;
        }
        let cands = &cands[..k];
        if *q >= db.len() || cands.iter().any(|&c| c >= db.len()) {
            return Err(Error::Data(format!(
                "query {q} or one of its candidates is outside the {}-frame database",
                db.len()
            )));
        }
        let qp = db.pose(*q);
        samples.push(RankingSample {
            query_id: *q,
            candidates: cands.to_vec(),
            descriptors: db.descriptors().select_rows(cands),
            relevance: cands
                .iter()
                .map(|&c| -pose_distance(&qp, &db.pose(c)))
                .collect(),
            query_pose: qp,
            query_descriptor: db.descriptor(*q).to_vec(),
        });
    }
    if skipped > 0 {
        warn!(
            "{}: skipped {skipped} queries with fewer than {k} candidates",
            db.sequence_id()
        );
    }
    Ok((samples, skipped))
}

/// Training samples for the loop-bearing queries of a retrieval set.
pub fn samples_from_retrieval(
    db: &DescriptorDatabase,
    set: &RetrievalSet,
) -> Result<Vec<RankingSample>> {
    let retrieved: Vec<(usize, Vec<usize>)> = set
        .queries
        .iter()
        .zip(&set.candidates)
        .zip(&set.truth)
        .filter(|(_, t)| !t.is_empty())
        .map(|((q, c), _)| (q.index, c.clone()))
        .collect();
    build_training_set(db, &retrieved, set.params.k).map(|(s, _)| s)
}

// log(1 + e^x) without overflow
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sum over y_i > y_j of log2(1 + exp(-sigma (s_i - s_j)))` and its
/// gradient with respect to `scores`.
pub fn logistic_loss(relevance: &[f64], scores: &[f64], sigma: f64) -> Result<(f64, Vec<f64>)> {
    if relevance.len() != scores.len() {
        return Err(Error::shape(
            "logistic_loss",
            format!("{} relevances, {} scores", relevance.len(), scores.len()),
        ));
    }
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let n = scores.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if relevance[i] > relevance[j] {
                let margin = sigma * (scores[i] - scores[j]);
                loss += softplus(-margin) / LN_2;
                let g = sigma * sigmoid(-margin) / LN_2;
                grad[i] -= g;
                grad[j] += g;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without a lower mean loss.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; nothing changed.
    Rejected,
}

/// One AdamW update with decoupled weight decay on a flat parameter vector.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamWState,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, state of {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::Rejected);
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        params[i] = params[i] * decay - cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps);
    }
    Ok(StepOutcome::Applied)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub rejected_steps: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    /// One JSON object per epoch, newline separated.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Loss and gradient of one sample under the current weights.
pub fn sample_loss_grad(
    cfg: &ModelConfig,
    w: &ModelWeights,
    sample: &RankingSample,
) -> Result<(f64, ModelWeights)> {
    let input = model::model_input(cfg, &sample.query_descriptor, &sample.descriptors)?;
    let (scores, trace) = model::forward(cfg, w, &input)?;
    let (loss, d_scores) = logistic_loss(&sample.relevance, &scores, cfg.loss_sigma)?;
    let grads = model::backward(cfg, w, &trace, &d_scores)?;
    Ok((loss, grads))
}

/// Mean per-query loss over `samples`.
pub fn mean_loss(cfg: &ModelConfig, w: &ModelWeights, samples: &[RankingSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let input = model::model_input(cfg, &s.query_descriptor, &s.descriptors)?;
        let scores = model::scores(cfg, w, &input)?;
        total += logistic_loss(&s.relevance, &scores, cfg.loss_sigma)?.0;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn check_samples(cfg: &ModelConfig, samples: &[RankingSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.descriptors.shape() != (cfg.k, cfg.d)
            || s.relevance.len() != cfg.k
            || s.candidates.len() != cfg.k
            || (cfg.include_query && s.query_descriptor.len() != cfg.d)
        {
            return Err(Error::shape(
                "train",
                format!(
                    "sample {i} has {:?} descriptors and {} relevances, model wants {}x{}",
                    s.descriptors.shape(),
                    s.relevance.len(),
                    cfg.k,
                    cfg.d
                ),
            ));
        }
    }
    Ok(())
}

fn accumulate(acc: &mut ModelWeights, g: &ModelWeights) {
    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

/// Mini-batch AdamW on the mean per-query logistic loss.
///
/// Weights start from `init_weights(model_cfg, cfg.seed)`. Samples are
/// reshuffled every epoch from a seeded generator, so runs are bitwise
/// reproducible.
pub fn train(
    samples: &[RankingSample],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(ModelWeights, TrainingLog)> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_samples(model_cfg, samples)?;
    let w = model::init_weights(model_cfg, cfg.seed)?;
    train_from(w, samples, cfg, model_cfg)
}

/// Like [`train`], starting from the given weights.
pub fn train_from(
    mut w: ModelWeights,
    samples: &[RankingSample],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(ModelWeights, TrainingLog)> {
    cfg.validate()?;
    check_samples(model_cfg, samples)?;
    w.check_shapes(model_cfg)?;

    let mut log = TrainingLog::default();
    let mut state = AdamWState::new(w.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut best = f64::INFINITY;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut rejected = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = ModelWeights::zeros(model_cfg);
            for &i in batch {
                let (loss, g) = sample_loss_grad(model_cfg, &w, &samples[i])?;
                epoch_loss += loss;
                accumulate(&mut grads, &g);
            }
            let inv = 1.0 / batch.len() as f64;
            let mut flat_g = grads.to_flat();
            flat_g.iter_mut().for_each(|g| *g *= inv);
            let mut flat_w = w.to_flat();
            if adamw_step(&mut flat_w, &flat_g, &mut state, cfg)? == StepOutcome::Rejected {
                rejected += 1;
                warn!("epoch {epoch}: rejected a step with a non-finite gradient");
            } else {
                w.set_flat(&flat_w)?;
            }
        }
        let mean = epoch_loss / samples.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: mean,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            rejected_steps: rejected,
        });
        info!("epoch {epoch}: mean loss {mean:.4}");

        if let Some(patience) = cfg.early_stop_patience {
            if mean < best {
                best = mean;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    Ok((w, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    // O(k^2) reference, evaluated term by term with no stabilisation.
    fn pair_sum(y: &[f64], s: &[f64], sigma: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] > y[j] {
                    total += (1.0 + (-sigma * (s[i] - s[j])).exp()).log2();
                }
            }
        }
        total
    }

    #[test]
    fn loss_examples() {
        let (l, g) = logistic_loss(&[1.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        assert!((g[0] + g[1]).abs() < 1e-15 && g[0] < 0.0);

        let (l, g) = logistic_loss(&[2.0; 5], &[0.3, -1.0, 4.0, 0.0, 2.0], 1.7).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));

        let (l, _) = logistic_loss(&[1.0, 0.0], &[2.0, 0.0], 1.0).unwrap();
        assert!((l - (1.0 + (-2.0_f64).exp()).log2()).abs() < 1e-15);

        assert!(logistic_loss(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn loss_is_stable_for_large_margins() {
        let (l, g) = logistic_loss(&[1.0, 0.0], &[-800.0, 800.0], 1.0).unwrap();
        assert!((l - 1600.0 / LN_2).abs() < 1e-9);
        assert!(g.iter().all(|x| x.is_finite()));
        let (l, _) = logistic_loss(&[1.0, 0.0], &[800.0, -800.0], 1.0).unwrap();
        assert!((0.0..1e-300).contains(&l));
    }

    #[test]
    fn loss_matches_pair_sum_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let k = rng.random_range(2..=6);
            let y: Vec<f64> = (0..k).map(|_| rng.random_range(-3i32..3) as f64).collect();
            let s: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            let sigma = rng.random_range(0.1..3.0);
            let (l, _) = logistic_loss(&y, &s, sigma).unwrap();
            assert!((l - pair_sum(&y, &s, sigma)).abs() < 1e-10);
        }
    }

    #[test]
    fn build_training_set_relevance_is_negated_distance() {
        let poses = vec![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 30.0, 0.0], [0.0, 0.0, 0.0]];
        let db = DescriptorDatabase::new(
            "s",
            poses,
            Mat::from_rows(&[[0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.5, 0.5]]).unwrap(),
            vec![0, 1, 2, 3],
        )
        .unwrap();
        let (samples, skipped) =
            build_training_set(&db, &[(0, vec![3, 1, 2]), (1, vec![0])], 3).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].relevance, vec![0.0, -5.0, -30.0]);
        assert_eq!(samples[0].descriptors.row(0), &[0.5, 0.5]);
        assert!(build_training_set(&db, &[(0, vec![9, 1, 2])], 3).is_err());
    }

    #[test]
    fn adamw_zero_gradient_cases() {
        let mut cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = vec![1.0, -2.0, 0.5];
        let mut st = AdamWState::new(3);
        adamw_step(&mut w, &[0.0; 3], &mut st, &cfg).unwrap();
        assert_eq!(w, vec![1.0, -2.0, 0.5]);

        cfg.weight_decay = 5e-4;
        adamw_step(&mut w, &[0.0; 3], &mut st, &cfg).unwrap();
        let f = 1.0 - 1e-4 * 5e-4;
        assert_eq!(w, vec![f, -2.0 * f, 0.5 * f]);
    }

    #[test]
    fn adamw_rejects_non_finite_gradient() {
        let cfg = TrainConfig::default();
        let mut w = vec![1.0, 1.0];
        let mut st = AdamWState::new(2);
        let out = adamw_step(&mut w, &[f64::NAN, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(out, StepOutcome::Rejected);
        assert_eq!(w, vec![1.0, 1.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn adamw_descends_convex_bowl() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut w = vec![1.0, 1.0];
        let mut st = AdamWState::new(2);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            adamw_step(&mut w, &g, &mut st, &cfg).unwrap();
            let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
            assert!(norm < prev);
            prev = norm;
        }
    }

    fn toy_samples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<RankingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|q| {
                let data = (0..cfg.k * cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect();
                RankingSample {
                    query_id: q,
                    candidates: (0..cfg.k).collect(),
                    descriptors: Mat::from_vec(cfg.k, cfg.d, data).unwrap(),
                    relevance: (0..cfg.k).map(|_| -rng.random_range(0.0..50.0)).collect(),
                    query_pose: [0.0; 3],
                    query_descriptor: vec![0.0; cfg.d],
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let cfg = ModelConfig::tiny();
        let samples = toy_samples(&cfg, 3, 0);
        let tc = TrainConfig {
            epochs: 0,
            seed: 5,
            ..Default::default()
        };
        let (w, log) = train(&samples, &tc, &cfg).unwrap();
        assert_eq!(w, model::init_weights(&cfg, 5).unwrap());
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn overfits_a_single_sample() {
        let cfg = ModelConfig::tiny();
        let samples = toy_samples(&cfg, 1, 1);
        let tc = TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let initial = mean_loss(&cfg, &model::init_weights(&cfg, 0).unwrap(), &samples).unwrap();
        let (w, log) = train(&samples, &tc, &cfg).unwrap();
        let fin = mean_loss(&cfg, &w, &samples).unwrap();
        assert_eq!(log.epochs.len(), 200);
        assert!(fin < initial, "{fin} !< {initial}");
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = ModelConfig::tiny();
        let samples = toy_samples(&cfg, 10, 2);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 9,
            ..Default::default()
        };
        let (a, la) = train(&samples, &tc, &cfg).unwrap();
        let (b, lb) = train(&samples, &tc, &cfg).unwrap();
        let bits = |w: &ModelWeights| w.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(la.losses(), lb.losses());
        assert_eq!(la.to_json_lines().unwrap().lines().count(), 3);
    }

    #[test]
    fn early_stopping_and_shape_errors() {
        let cfg = ModelConfig::tiny();
        let mut samples = toy_samples(&cfg, 4, 3);
        // equal relevances give a constant zero loss
        let mut flat = samples.clone();
        flat.iter_mut().for_each(|s| s.relevance = vec![-1.0; cfg.k]);
        let tc = TrainConfig {
            epochs: 50,
            early_stop_patience: Some(2),
            ..Default::default()
        };
        let (_, log) = train(&flat, &tc, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 3);

        samples[2].relevance.pop();
        assert!(matches!(train(&samples, &tc, &cfg), Err(Error::Shape { .. })));
        assert!(matches!(train(&[], &tc, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            n_heads: 2,
            n_encoders: 2,
            ..ModelConfig::tiny()
        };
        let sample = &toy_samples(&cfg, 1, 4)[0];
        let w = model::init_weights(&cfg, 4).unwrap();
        let (_, g) = sample_loss_grad(&cfg, &w, sample).unwrap();
        let mut probe = w.clone();
        let err = grad_check(
            |flat| {
                probe.set_flat(flat).unwrap();
                mean_loss(&cfg, &probe, std::slice::from_ref(sample)).unwrap()
            },
            &w.to_flat(),
            &g.to_flat(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn loss_invariants(
            y in prop::collection::vec(-5i32..5, 2..8),
            s in prop::collection::vec(-5.0f64..5.0, 8),
            sigma in 0.1f64..4.0,
            shift in -10.0f64..10.0,
            seed in any::<u64>(),
        ) {
            let k = y.len();
            let y: Vec<f64> = y.into_iter().map(f64::from).collect();
            let s = &s[..k];
            let (l, g) = logistic_loss(&y, s, sigma).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);

            let shifted: Vec<f64> = s.iter().map(|x| x + shift).collect();
            prop_assert!((logistic_loss(&y, &shifted, sigma).unwrap().0 - l).abs() < 1e-9);

            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let sp: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
            prop_assert!((logistic_loss(&yp, &sp, sigma).unwrap().0 - l).abs() < 1e-12);

            let pairs = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).filter(|&(i, j)| y[i] > y[j]).count();
            let (lc, _) = logistic_loss(&y, &vec![0.7; k], sigma).unwrap();
            prop_assert_eq!(lc, pairs as f64);

            let h = 1e-6;
            for i in 0..k {
                let mut p = s.to_vec();
                p[i] += h;
                let mut m = s.to_vec();
                m[i] -= h;
                let num = (logistic_loss(&y, &p, sigma).unwrap().0 - logistic_loss(&y, &m, sigma).unwrap().0) / (2.0 * h);
                prop_assert!((num - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0));
            }
        }
    }
}
