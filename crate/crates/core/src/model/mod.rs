//! The transformer re-ranker.
//!
//! A stack of `n_encoders` post-norm encoder blocks over the `k x d` candidate
//! descriptor matrix, followed by a max-pool over features (one scalar per
//! candidate) and a `k x k` linear scoring head. Candidates are re-ordered by
//! descending score.
//!
//! Backpropagation is written out by hand per layer; see [`backward`].

mod io;

pub use io::{
    decode_weights, encode_weights, load_weights, load_weights_for, save_weights, WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, layer_norm_with_stats, softmax_rows, LayerNormStats, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Descriptor (feature) dimension.
    pub d: usize,
    /// Number of candidates re-ranked per query.
    pub k: usize,
    /// Hidden width of the feed-forward block.
    pub d_h: usize,
    pub n_heads: usize,
    pub n_encoders: usize,
    /// Adds a skip connection around the feed-forward block. Off by default:
    /// the reference block normalises the feed-forward output alone.
    pub second_residual: bool,
    /// Slope of the pairwise logistic loss.
    pub loss_sigma: f64,
    pub ln_eps: f64,
    /// Prepend the query descriptor as an extra input row. The scoring head
    /// then maps `k + 1` pooled values to `k` scores.
    pub include_query: bool,
    /// L2-normalise descriptors before they enter the encoder.
    pub normalize_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            k: 25,
            d_h: 512,
            n_heads: 1,
            n_encoders: 1,
            second_residual: false,
            loss_sigma: 1.0,
            ln_eps: numkit::LN_EPS,
            include_query: false,
            normalize_input: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration used throughout the tests.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            k: 4,
            d_h: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("k", self.k),
            ("d_h", self.d_h),
            ("n_heads", self.n_heads),
            ("n_encoders", self.n_encoders),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be at least 1")));
            }
        }
        if !(self.loss_sigma > 0.0 && self.loss_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "loss_sigma must be positive, got {}",
                self.loss_sigma
            )));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config(format!(
                "ln_eps must be non-negative, got {}",
                self.ln_eps
            )));
        }
        Ok(())
    }

    /// Rows fed to the encoder: the candidates, plus the query if enabled.
    pub fn input_rows(&self) -> usize {
        self.k + usize::from(self.include_query)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Matrix,
    Gain,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: TensorKind,
}

impl TensorSpec {
    fn new(name: String, rows: usize, cols: usize, kind: TensorKind) -> Self {
        Self {
            name,
            rows,
            cols,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every learnable tensor for `cfg`, in canonical order. Vectors are `1 x n`.
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    use TensorKind::*;
    let (d, dh) = (cfg.d, cfg.d_h);
    let mut specs = Vec::new();
    for e in 0..cfg.n_encoders {
        for h in 0..cfg.n_heads {
            for p in ["wq", "wk", "wv"] {
                specs.push(TensorSpec::new(format!("enc{e}.head{h}.{p}"), d, d, Matrix));
            }
        }
        specs.push(TensorSpec::new(format!("enc{e}.w_ao"), cfg.n_heads * d, d, Matrix));
        specs.push(TensorSpec::new(format!("enc{e}.ln1.gain"), 1, d, Gain));
        specs.push(TensorSpec::new(format!("enc{e}.ln1.bias"), 1, d, Bias));
        specs.push(TensorSpec::new(format!("enc{e}.ffn.w1"), d, dh, Matrix));
        specs.push(TensorSpec::new(format!("enc{e}.ffn.b1"), 1, dh, Bias));
        specs.push(TensorSpec::new(format!("enc{e}.ffn.w2"), dh, d, Matrix));
        specs.push(TensorSpec::new(format!("enc{e}.ffn.b2"), 1, d, Bias));
        specs.push(TensorSpec::new(format!("enc{e}.ln2.gain"), 1, d, Gain));
        specs.push(TensorSpec::new(format!("enc{e}.ln2.bias"), 1, d, Bias));
    }
    specs.push(TensorSpec::new("head.w_o".into(), cfg.input_rows(), cfg.k, Matrix));
    specs.push(TensorSpec::new("head.b_o".into(), 1, cfg.k, Bias));
    specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub heads: Vec<HeadWeights>,
    /// `(n_heads * d) x d` output projection of the concatenated heads.
    pub w_ao: Mat,
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
}

/// All learnable tensors. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub encoders: Vec<EncoderWeights>,
    pub w_o: Mat,
    pub b_o: Mat,
}

impl ModelWeights {
    /// All-zero tensors shaped for `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::from_tensors(
            cfg,
            tensor_specs(cfg)
                .iter()
                .map(|s| Mat::zeros(s.rows, s.cols))
                .collect(),
        )
        .expect("specs and assembly agree")
    }

    /// Assembles weights from tensors listed in [`tensor_specs`] order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Mat>) -> Result<Self> {
        let specs = tensor_specs(cfg);
        if tensors.len() != specs.len() {
            return Err(Error::shape(
                "ModelWeights::from_tensors",
                format!("expected {} tensors, got {}", specs.len(), tensors.len()),
            ));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if t.shape() != (s.rows, s.cols) {
                return Err(Error::shape(
                    "ModelWeights::from_tensors",
                    format!(
                        "{} should be {}x{}, got {:?}",
                        s.name,
                        s.rows,
                        s.cols,
                        t.shape()
                    ),
                ));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let mut encoders = Vec::with_capacity(cfg.n_encoders);
        for _ in 0..cfg.n_encoders {
            let heads = (0..cfg.n_heads)
                .map(|_| HeadWeights {
                    wq: next(),
                    wk: next(),
                    wv: next(),
                })
                .collect();
            encoders.push(EncoderWeights {
                heads,
                w_ao: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            });
        }
        Ok(Self {
            encoders,
            w_o: next(),
            b_o: next(),
        })
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        for e in &self.encoders {
            for h in &e.heads {
                out.extend([&h.wq, &h.wk, &h.wv]);
            }
            out.extend([
                &e.w_ao, &e.ln1_gain, &e.ln1_bias, &e.w1, &e.b1, &e.w2, &e.b2, &e.ln2_gain,
                &e.ln2_bias,
            ]);
        }
        out.extend([&self.w_o, &self.b_o]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for e in &mut self.encoders {
            for h in &mut e.heads {
                out.extend([&mut h.wq, &mut h.wk, &mut h.wv]);
            }
            out.extend([
                &mut e.w_ao,
                &mut e.ln1_gain,
                &mut e.ln1_bias,
                &mut e.w1,
                &mut e.b1,
                &mut e.w2,
                &mut e.b2,
                &mut e.ln2_gain,
                &mut e.ln2_bias,
            ]);
        }
        out.extend([&mut self.w_o, &mut self.b_o]);
        out
    }

    /// Checks that every tensor has the shape `cfg` dictates.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = tensor_specs(cfg);
        let tensors = self.tensors();
        if tensors.len() != specs.len()
            || self.encoders.len() != cfg.n_encoders
            || self.encoders.iter().any(|e| e.heads.len() != cfg.n_heads)
        {
            return Err(Error::shape(
                "ModelWeights",
                format!(
                    "weights have {} encoders / {} tensors, config wants {} / {}",
                    self.encoders.len(),
                    tensors.len(),
                    cfg.n_encoders,
                    specs.len()
                ),
            ));
        }
        for (s, t) in specs.iter().zip(tensors) {
            if t.shape() != (s.rows, s.cols) {
                return Err(Error::shape(
                    "ModelWeights",
                    format!("{} is {:?}, config wants {}x{}", s.name, t.shape(), s.rows, s.cols),
                ));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters flattened in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "ModelWeights::set_flat",
                format!("{} values for {} parameters", flat.len(), self.num_params()),
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            h = (h ^ t.rows() as u64).wrapping_mul(0x100_0000_01b3);
            for x in t.data() {
                h = (h ^ x.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

/// Xavier-uniform matrices, zero biases, unit layer-norm gains.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = tensor_specs(cfg)
        .into_iter()
        .map(|s| match s.kind {
            TensorKind::Matrix => {
                let bound = (6.0 / (s.rows + s.cols) as f64).sqrt();
                let data = (0..s.len())
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Mat::from_vec(s.rows, s.cols, data).expect("sized from spec")
            }
            TensorKind::Gain => Mat::filled(s.rows, s.cols, 1.0),
            TensorKind::Bias => Mat::zeros(s.rows, s.cols),
        })
        .collect();
    ModelWeights::from_tensors(cfg, tensors)
}

/// Per-tensor parameter count for a configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamBreakdown {
    pub tensors: Vec<(String, usize)>,
    pub encoder_total: usize,
    pub head_total: usize,
    pub total: usize,
}

pub fn param_count(cfg: &ModelConfig) -> ParamBreakdown {
    let tensors: Vec<(String, usize)> = tensor_specs(cfg)
        .into_iter()
        .map(|s| {
            let n = s.len();
            (s.name, n)
        })
        .collect();
    let head_total = tensors
        .iter()
        .filter(|(n, _)| n.starts_with("head."))
        .map(|(_, c)| c)
        .sum();
    let total: usize = tensors.iter().map(|(_, c)| c).sum();
    ParamBreakdown {
        tensors,
        encoder_total: total - head_total,
        head_total,
        total,
    }
}

impl ParamBreakdown {
    /// Human-readable table, optionally compared against a reference total.
    pub fn render(&self, reference: Option<usize>) -> String {
        let mut s = String::new();
        for (name, n) in &self.tensors {
            s.push_str(&format!("{name:<22} {n:>10}\n"));
        }
        s.push_str(&format!("{:<22} {:>10}\n", "encoders", self.encoder_total));
        s.push_str(&format!("{:<22} {:>10}\n", "scoring head", self.head_total));
        s.push_str(&format!("{:<22} {:>10}\n", "total", self.total));
        if let Some(r) = reference {
            let delta = self.total as i64 - r as i64;
            s.push_str(&format!("{:<22} {:>10}\n", "reference", r));
            s.push_str(&format!("{:<22} {:>+10}\n", "delta", delta));
        }
        s
    }
}

/// Builds the encoder input from a query descriptor and its `k x d`
/// candidate matrix, applying the configured normalisation and query row.
pub fn model_input(cfg: &ModelConfig, query: &[f64], candidates: &Mat) -> Result<Mat> {
    if candidates.shape() != (cfg.k, cfg.d) {
        return Err(Error::shape(
            "model_input",
            format!(
                "candidates are {:?}, model expects {}x{}",
                candidates.shape(),
                cfg.k,
                cfg.d
            ),
        ));
    }
    let mut m = if cfg.include_query {
        if query.len() != cfg.d {
            return Err(Error::shape(
                "model_input",
                format!("query has {} features, model expects {}", query.len(), cfg.d),
            ));
        }
        let mut data = Vec::with_capacity(cfg.input_rows() * cfg.d);
        data.extend_from_slice(query);
        data.extend_from_slice(candidates.data());
        Mat::from_vec(cfg.input_rows(), cfg.d, data)?
    } else {
        candidates.clone()
    };
    if cfg.normalize_input {
        for r in 0..m.rows() {
            let row = m.row_mut(r);
            let n = numkit::l2_norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct HeadTrace {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Softmax attention weights.
    pub attn: Mat,
}

#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub input: Mat,
    pub heads: Vec<HeadTrace>,
    /// Heads concatenated along features.
    pub concat: Mat,
    pub ln1: LayerNormStats,
    pub attn_out: Mat,
    /// Feed-forward pre-activation; its sign is the ReLU mask.
    pub pre_relu: Mat,
    pub hidden: Mat,
    pub ln2: LayerNormStats,
    pub output: Mat,
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub encoders: Vec<EncoderTrace>,
    /// Row-wise max over features of the last encoder output.
    pub pooled: Vec<f64>,
    /// Feature index that won each row's max (lowest index on ties).
    pub argmax: Vec<usize>,
    weights_fingerprint: u64,
}

impl ForwardTrace {
    pub fn encoder_output(&self) -> &Mat {
        &self.encoders.last().expect("at least one encoder").output
    }
}

fn check_input(cfg: &ModelConfig, input: &Mat) -> Result<()> {
    if input.shape() != (cfg.input_rows(), cfg.d) {
        return Err(Error::shape(
            "forward",
            format!(
                "input is {:?}, model expects {}x{}",
                input.shape(),
                cfg.input_rows(),
                cfg.d
            ),
        ));
    }
    Ok(())
}

fn encoder_forward(cfg: &ModelConfig, w: &EncoderWeights, z: &Mat) -> Result<EncoderTrace> {
    let rows = z.rows();
    let d = cfg.d;
    let scale = 1.0 / (d as f64).sqrt();

    let mut heads = Vec::with_capacity(w.heads.len());
    let mut concat = Mat::zeros(rows, d * w.heads.len());
    for (j, hw) in w.heads.iter().enumerate() {
        let q = z.matmul(&hw.wq)?;
        let k = z.matmul(&hw.wk)?;
        let v = z.matmul(&hw.wv)?;
        let mut logits = q.matmul_t(&k)?;
        logits.scale(scale);
        let attn = softmax_rows(&logits);
        let out = attn.matmul(&v)?;
        for r in 0..rows {
            concat.row_mut(r)[j * d..(j + 1) * d].copy_from_slice(out.row(r));
        }
        heads.push(HeadTrace { q, k, v, attn });
    }

    let residual = z.add(&concat.matmul(&w.w_ao)?)?;
    let (attn_out, ln1) =
        layer_norm_with_stats(&residual, w.ln1_gain.data(), w.ln1_bias.data(), cfg.ln_eps)?;

    let mut pre_relu = attn_out.matmul(&w.w1)?;
    pre_relu.add_row_broadcast(w.b1.data())?;
    let mut hidden = pre_relu.clone();
    hidden.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
    let mut ffn = hidden.matmul(&w.w2)?;
    ffn.add_row_broadcast(w.b2.data())?;
    if cfg.second_residual {
        ffn.add_assign(&attn_out)?;
    }
    let (output, ln2) =
        layer_norm_with_stats(&ffn, w.ln2_gain.data(), w.ln2_bias.data(), cfg.ln_eps)?;

    Ok(EncoderTrace {
        input: z.clone(),
        heads,
        concat,
        ln1,
        attn_out,
        pre_relu,
        hidden,
        ln2,
        output,
    })
}

/// Runs the encoder stack and scoring head. Returns one score per
/// candidate, in input order, plus the activations needed by [`backward`].
pub fn forward(cfg: &ModelConfig, w: &ModelWeights, input: &Mat) -> Result<(Vec<f64>, ForwardTrace)> {
    check_input(cfg, input)?;
    w.check_shapes(cfg)?;

    let mut encoders = Vec::with_capacity(cfg.n_encoders);
    let mut z = input.clone();
    for ew in &w.encoders {
        let t = encoder_forward(cfg, ew, &z)?;
        z = t.output.clone();
        encoders.push(t);
    }

    let mut pooled = Vec::with_capacity(z.rows());
    let mut argmax = Vec::with_capacity(z.rows());
    for row in z.iter_rows() {
        let (mut best, mut idx) = (row[0], 0);
        for (c, &x) in row.iter().enumerate().skip(1) {
            if x > best {
                best = x;
                idx = c;
            }
        }
        pooled.push(best);
        argmax.push(idx);
    }

    let mut scores = Mat::row_vector(&pooled).matmul(&w.w_o)?.into_vec();
    for (s, b) in scores.iter_mut().zip(w.b_o.data()) {
        *s += b;
    }

    Ok((
        scores,
        ForwardTrace {
            encoders,
            pooled,
            argmax,
            weights_fingerprint: w.fingerprint(),
        },
    ))
}

/// Scores only; see [`forward`].
pub fn scores(cfg: &ModelConfig, w: &ModelWeights, input: &Mat) -> Result<Vec<f64>> {
    forward(cfg, w, input).map(|(s, _)| s)
}

/// Output of the encoder stack, below the scoring head.
pub fn encode(cfg: &ModelConfig, w: &ModelWeights, input: &Mat) -> Result<Mat> {
    forward(cfg, w, input).map(|(_, t)| t.encoder_output().clone())
}

fn layer_norm_backward(
    dy: &Mat,
    stats: &LayerNormStats,
    gain: &[f64],
    dgain: &mut Mat,
    dbias: &mut Mat,
) -> Mat {
    let n = dy.cols() as f64;
    let mut dx = Mat::zeros(dy.rows(), dy.cols());
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = stats.normalized.row(r);
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for c in 0..dyr.len() {
            let g = dyr[c] * gain[c];
            mean_g += g;
            mean_gx += g * xh[c];
            dgain.data_mut()[c] += dyr[c] * xh[c];
            dbias.data_mut()[c] += dyr[c];
        }
        mean_g /= n;
        mean_gx /= n;
        let rs = stats.rstd[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dyr[c] * gain[c] - mean_g - xh[c] * mean_gx);
        }
    }
    dx
}

fn add_into(acc: &mut Mat, m: &Mat) {
    acc.add_assign(m).expect("gradient shapes mirror weights");
}

/// Back-propagates `d_scores` (dLoss/dS) through the head and encoder stack.
///
/// The trace must come from [`forward`] with the same weights; anything else
/// is rejected as a contract violation.
pub fn backward(
    cfg: &ModelConfig,
    w: &ModelWeights,
    trace: &ForwardTrace,
    d_scores: &[f64],
) -> Result<ModelWeights> {
    if d_scores.len() != cfg.k {
        return Err(Error::shape(
            "backward",
            format!("{} score gradients for k = {}", d_scores.len(), cfg.k),
        ));
    }
    w.check_shapes(cfg)?;
    if trace.encoders.len() != cfg.n_encoders
        || trace.pooled.len() != cfg.input_rows()
        || trace.weights_fingerprint != w.fingerprint()
    {
        return Err(Error::Contract(
            "forward trace does not belong to these weights".into(),
        ));
    }

    let mut g = ModelWeights::zeros(cfg);
    let rows = cfg.input_rows();
    let d = cfg.d;

    // scoring head: S = v W_o + b_o
    let mut dv = vec![0.0; rows];
    for i in 0..rows {
        let wrow = w.w_o.row(i);
        let grow = g.w_o.row_mut(i);
        let mut acc = 0.0;
        for c in 0..cfg.k {
            grow[c] = trace.pooled[i] * d_scores[c];
            acc += wrow[c] * d_scores[c];
        }
        dv[i] = acc;
    }
    g.b_o.data_mut().copy_from_slice(d_scores);

    // max-pool routes to the winning feature only
    let mut dz = Mat::zeros(rows, d);
    for (i, &c) in trace.argmax.iter().enumerate() {
        dz.set(i, c, dv[i]);
    }

    let scale = 1.0 / (d as f64).sqrt();
    for (e, (ew, et)) in w.encoders.iter().zip(&trace.encoders).enumerate().rev() {
        let ge = &mut g.encoders[e];

        let d_ffn = layer_norm_backward(
            &dz,
            &et.ln2,
            ew.ln2_gain.data(),
            &mut ge.ln2_gain,
            &mut ge.ln2_bias,
        );
        let mut d_attn_out = if cfg.second_residual {
            d_ffn.clone()
        } else {
            Mat::zeros(rows, d)
        };

        add_into(&mut ge.w2, &et.hidden.t_matmul(&d_ffn)?);
        ge.b2.data_mut().copy_from_slice(&d_ffn.col_sums());
        let mut d_pre = d_ffn.matmul_t(&ew.w2)?;
        for (dp, p) in d_pre.data_mut().iter_mut().zip(et.pre_relu.data()) {
            if *p <= 0.0 {
                *dp = 0.0;
            }
        }
        add_into(&mut ge.w1, &et.attn_out.t_matmul(&d_pre)?);
        ge.b1.data_mut().copy_from_slice(&d_pre.col_sums());
        add_into(&mut d_attn_out, &d_pre.matmul_t(&ew.w1)?);

        let d_res = layer_norm_backward(
            &d_attn_out,
            &et.ln1,
            ew.ln1_gain.data(),
            &mut ge.ln1_gain,
            &mut ge.ln1_bias,
        );

        // residual: input receives d_res directly, plus whatever flows
        // back through attention
        let mut d_input = d_res.clone();
        add_into(&mut ge.w_ao, &et.concat.t_matmul(&d_res)?);
        let d_concat = d_res.matmul_t(&ew.w_ao)?;

        for (j, (hw, ht)) in ew.heads.iter().zip(&et.heads).enumerate() {
            let mut d_head = Mat::zeros(rows, d);
            for r in 0..rows {
                d_head
                    .row_mut(r)
                    .copy_from_slice(&d_concat.row(r)[j * d..(j + 1) * d]);
            }
            let d_attn = d_head.matmul_t(&ht.v)?;
            let d_v = ht.attn.t_matmul(&d_head)?;

            let mut d_logits = Mat::zeros(rows, rows);
            for r in 0..rows {
                let a = ht.attn.row(r);
                let da = d_attn.row(r);
                let inner = numkit::dot(a, da);
                for (c, o) in d_logits.row_mut(r).iter_mut().enumerate() {
                    *o = a[c] * (da[c] - inner) * scale;
                }
            }
            let d_q = d_logits.matmul(&ht.k)?;
            let d_k = d_logits.t_matmul(&ht.q)?;

            let gh = &mut ge.heads[j];
            add_into(&mut gh.wq, &et.input.t_matmul(&d_q)?);
            add_into(&mut gh.wk, &et.input.t_matmul(&d_k)?);
            add_into(&mut gh.wv, &et.input.t_matmul(&d_v)?);

            add_into(&mut d_input, &d_q.matmul_t(&hw.wq)?);
            add_into(&mut d_input, &d_k.matmul_t(&hw.wk)?);
            add_into(&mut d_input, &d_v.matmul_t(&hw.wv)?);
        }
        dz = d_input;
    }

    Ok(g)
}

/// Indices that sort `scores` descending; ties keep their original order.
pub fn argsort_descending(scores: &[f64]) -> Vec<usize> {
    // -0.0 and 0.0 must tie
    let key = |i: usize| if scores[i] == 0.0 { 0.0 } else { scores[i] };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    idx
}

/// Re-orders `candidates` by descending model score.
pub fn rerank(
    cfg: &ModelConfig,
    w: &ModelWeights,
    candidates: &[usize],
    input: &Mat,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if candidates.len() != cfg.k {
        return Err(Error::shape(
            "rerank",
            format!("{} candidates for k = {}", candidates.len(), cfg.k),
        ));
    }
    let s = scores(cfg, w, input)?;
    let order = argsort_descending(&s);
    Ok((order.iter().map(|&i| candidates[i]).collect(), s))
}
