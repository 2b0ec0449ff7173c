//! Self-checks run by `trer verify`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use trer_core::baselines::{AlphaQe, Identity, Oracle};
use trer_core::benchmark::Trer;
use trer_core::model::{
    self, decode_weights, encode_weights, init_weights, param_count, ForwardTrace, ModelConfig,
    ModelWeights,
};
use trer_core::numkit::{grad_check, squared_distance, Mat};
use trer_core::retrieval::{evaluate, knn, DescriptorDatabase, EvalParams, Reranker};
use trer_core::synthdata::{decode_dataset, encode_dataset, generate_world, WorldConfig};
use trer_core::training::{logistic_loss, train, RankingSample, TrainConfig};
use trer_core::{Error, Result};

pub type BackwardFn =
    fn(&ModelConfig, &ModelWeights, &ForwardTrace, &[f64]) -> Result<ModelWeights>;

/// Injection points for mutation tests.
#[derive(Clone, Copy)]
pub struct VerifyHooks {
    pub backward: BackwardFn,
}

impl Default for VerifyHooks {
    fn default() -> Self {
        Self {
            backward: model::backward,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Suite = fn(&VerifyHooks) -> Result<(bool, String)>;

pub const SUITES: [(&str, Suite); 7] = [
    ("gradcheck", gradcheck),
    ("loss-oracle", loss_oracle),
    ("knn-oracle", knn_oracle),
    ("rerank-permutation", rerank_permutation),
    ("round-trip", round_trip),
    ("determinism", determinism),
    ("param-count", param_count_suite),
];

/// Runs every suite once, in order. A suite that errors counts as failed.
pub fn run_all(hooks: &VerifyHooks) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|&(name, suite)| {
            let start = Instant::now();
            let (passed, detail) = match suite(hooks) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            SuiteResult {
                suite: name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        k: 4,
        d_h: 16,
        n_heads: 2,
        n_encoders: 2,
        ..ModelConfig::default()
    }
}

fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Mat, Vec<f64>) {
    let data = (0..cfg.k * cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rel = (0..cfg.k).map(|_| -rng.random_range(0.0..40.0)).collect();
    (Mat::from_vec(cfg.k, cfg.d, data).unwrap(), rel)
}

/// Largest relative error between the analytic gradient of the full loss
/// and central differences, for one seed.
pub fn gradcheck_error(cfg: &ModelConfig, seed: u64, hooks: &VerifyHooks) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, rel) = random_sample(cfg, &mut rng);
    let w = init_weights(cfg, seed)?;
    let (s, trace) = model::forward(cfg, &w, &x)?;
    let (_, ds) = logistic_loss(&rel, &s, cfg.loss_sigma)?;
    let g = (hooks.backward)(cfg, &w, &trace, &ds)?;
    let mut probe = w.clone();
    grad_check(
        |flat| {
            probe.set_flat(flat).expect("flat length is fixed");
            let s = model::scores(cfg, &probe, &x).expect("shapes are fixed");
            logistic_loss(&rel, &s, cfg.loss_sigma).expect("lengths match").0
        },
        &w.to_flat(),
        &g.to_flat(),
        1e-5,
    )
}

fn gradcheck(hooks: &VerifyHooks) -> Result<(bool, String)> {
    let cfg = gradcheck_config();
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        worst = worst.max(gradcheck_error(&cfg, seed, hooks)?);
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e} over 3 seeds")))
}

/// Term-by-term pair sum without any stabilisation.
pub fn pair_sum_loss(y: &[f64], s: &[f64], sigma: f64) -> f64 {
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

fn loss_oracle(_: &VerifyHooks) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut count_ok = true;
    for _ in 0..50 {
        let k = rng.random_range(2..=6);
        let y: Vec<f64> = (0..k).map(|_| rng.random_range(-3i32..3) as f64).collect();
        let s: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let sigma = rng.random_range(0.1..3.0);
        let (l, _) = logistic_loss(&y, &s, sigma)?;
        worst = worst.max((l - pair_sum_loss(&y, &s, sigma)).abs());
        let pairs = (0..k)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .filter(|&(i, j)| y[i] > y[j])
            .count();
        count_ok &= logistic_loss(&y, &vec![0.25; k], sigma)?.0 == pairs as f64;
    }
    Ok((
        worst < 1e-10 && count_ok,
        format!("max |difference| {worst:.1e}; equal-score pair counts exact: {count_ok}"),
    ))
}

fn random_db(n: usize, d: usize, seed: u64) -> Result<DescriptorDatabase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    DescriptorDatabase::new(
        "random",
        (0..n).map(|i| [i as f64, 0.0, 0.0]).collect(),
        Mat::from_vec(n, d, data)?,
        (0..n as u32).collect(),
    )
}

/// Full scan with ties to the lower index.
pub fn brute_force_knn(db: &DescriptorDatabase, q: &[f64], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..db.len())
        .map(|i| (squared_distance(q, db.descriptor(i)), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

fn knn_oracle(_: &VerifyHooks) -> Result<(bool, String)> {
    let db = random_db(500, 8, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        if knn(&db, &q, 25, None)? != brute_force_knn(&db, &q, 25) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} of 100 queries differ")))
}

fn small_world(seed: u64) -> WorldConfig {
    WorldConfig {
        sequence_id: "v".into(),
        n_frames: 600,
        descriptor_dim: 8,
        noise_sigma: 0.1,
        seed,
        ..WorldConfig::default()
    }
}

fn rerank_permutation(_: &VerifyHooks) -> Result<(bool, String)> {
    let db = generate_world(&small_world(1))?;
    let params = EvalParams {
        k: 10,
        ..EvalParams::default()
    };
    let cfg = ModelConfig {
        d: 8,
        k: 10,
        d_h: 8,
        ..ModelConfig::default()
    };
    let trer = Trer::new(cfg.clone(), init_weights(&cfg, 1)?)?;
    let qe = AlphaQe::default();
    let methods: [&dyn Reranker; 4] = [&Identity, &trer, &qe, &Oracle];
    let mut values = Vec::new();
    for m in methods {
        let r = evaluate(&db, m, params, &[10])?;
        values.push((m.name().to_string(), r.at(10)));
    }
    let ok = values.iter().all(|(_, v)| *v == values[0].1);
    Ok((ok, format!("Recall@10 per method: {values:?}")))
}

fn round_trip(_: &VerifyHooks) -> Result<(bool, String)> {
    let db = generate_world(&small_world(2))?;
    let bytes = encode_dataset(&db);
    let back = decode_dataset(&bytes)?;
    let mut ok = back == db && encode_dataset(&back) == bytes;

    let cfg = gradcheck_config();
    let w = init_weights(&cfg, 3)?;
    let wbytes = encode_weights(&cfg, &w)?;
    let (cfg2, w2) = decode_weights(&wbytes)?;
    ok &= cfg2 == cfg && w2.to_flat().iter().zip(w.to_flat()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut rejected = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let mut d = bytes.clone();
        let i = rng.random_range(0..d.len());
        d[i] ^= 1 << rng.random_range(0..8);
        let mut ww = wbytes.clone();
        let j = rng.random_range(0..ww.len());
        ww[j] ^= 1 << rng.random_range(0..8);
        let cut = rng.random_range(0..bytes.len());
        rejected += [
            decode_dataset(&d).is_err(),
            decode_weights(&ww).is_err(),
            decode_dataset(&bytes[..cut]).is_err(),
        ]
        .iter()
        .filter(|&&r| r)
        .count();
    }
    ok &= rejected == 150;
    Ok((ok, format!("bit-exact reload; {rejected} of 150 corruptions rejected")))
}

fn tiny_samples(cfg: &ModelConfig, db: &DescriptorDatabase) -> Vec<RankingSample> {
    (0..6)
        .map(|q| {
            let cands: Vec<usize> = (0..cfg.k).map(|i| (q * 37 + i * 11) % db.len()).collect();
            let qp = db.pose(q * 50);
            RankingSample {
                query_id: q * 50,
                descriptors: db.descriptors().select_rows(&cands),
                relevance: cands
                    .iter()
                    .map(|&c| -trer_core::retrieval::pose_distance(&qp, &db.pose(c)))
                    .collect(),
                candidates: cands,
                query_pose: qp,
                query_descriptor: db.descriptor(q * 50).to_vec(),
            }
        })
        .collect()
}

fn determinism(_: &VerifyHooks) -> Result<(bool, String)> {
    let a = encode_dataset(&generate_world(&small_world(9))?);
    let b = encode_dataset(&generate_world(&small_world(9))?);
    let db = decode_dataset(&a)?;
    let cfg = ModelConfig {
        d: 8,
        k: 5,
        d_h: 8,
        ..ModelConfig::default()
    };
    let samples = tiny_samples(&cfg, &db);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let (w1, _) = train(&samples, &tc, &cfg)?;
    let (w2, _) = train(&samples, &tc, &cfg)?;
    let same_weights = encode_weights(&cfg, &w1)? == encode_weights(&cfg, &w2)?;
    Ok((
        a == b && same_weights,
        format!("datasets identical: {}; weights identical: {same_weights}", a == b),
    ))
}

fn param_count_suite(_: &VerifyHooks) -> Result<(bool, String)> {
    let small = ModelConfig {
        d: 4,
        k: 3,
        d_h: 8,
        ..ModelConfig::default()
    };
    let n = param_count(&small).total;
    let w = init_weights(&small, 0)?;
    Ok((
        n == 168 && w.num_params() == 168,
        format!("d=4, k=3, d_h=8: {n} parameters (hand count 168)"),
    ))
}

pub fn check(results: &[SuiteResult]) -> Result<()> {
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.suite).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("failed suites: {}", failed.join(", "))))
    }
}
