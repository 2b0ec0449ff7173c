//! Synthetic loop-closure worlds and the dataset file format.
//!
//! A world is a vehicle route sampled every metre plus one descriptor per
//! frame. Descriptors come from a [`Sensor`]: smooth random Fourier features
//! of the 2D position plus an optional heading-dependent term. Frames then
//! get per-visit noise, and some are perceptually aliased: their scan
//! partly resembles another place on the route.
//! Sequences of one suite share a sensor and differ in route and placement,
//! the way real sequences share a descriptor network.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{l2_norm, Mat};
use crate::retrieval::{DescriptorDatabase, Pose};

pub const DATASET_MAGIC: &[u8; 4] = b"TRRD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Circuit,
    FigureEight,
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevisitDirection {
    Same,
    Opposite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub sequence_id: String,
    pub n_frames: usize,
    pub route: Route,
    /// Share of frames spent re-driving the start of the route.
    pub revisit_fraction: f64,
    pub revisit_direction: RevisitDirection,
    /// Sideways shift of the revisit lap in metres, to the left of travel.
    pub revisit_offset: f64,
    pub descriptor_dim: usize,
    /// Spatial frequency scale of the place features, in 1/m.
    pub feature_bandwidth: f64,
    pub noise_sigma: f64,
    pub heading_coupling: f64,
    /// Share of frames whose descriptor is blended with that of another,
    /// randomly chosen place on the route.
    pub alias_rate: f64,
    /// Weight of the other place in an aliased frame.
    pub alias_mix: f64,
    /// Unit-normalise descriptors before noise is added.
    pub normalize: bool,
    /// Route placement and noise.
    pub seed: u64,
    /// Descriptor extractor; shared by the sequences of a suite.
    pub sensor_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            sequence_id: "s00".into(),
            n_frames: 4000,
            route: Route::Circuit,
            revisit_fraction: 0.3,
            revisit_direction: RevisitDirection::Same,
            revisit_offset: 0.0,
            descriptor_dim: 32,
            feature_bandwidth: 0.05,
            noise_sigma: 0.05,
            heading_coupling: 0.0,
            alias_rate: 0.0,
            alias_mix: 0.6,
            normalize: true,
            seed: 0,
            sensor_seed: 0,
        }
    }
}

impl WorldConfig {
    /// Checks the config for worlds that will be queried with `k` candidates.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.sequence_id.is_empty() || self.sequence_id.len() > u16::MAX as usize {
            return Err(Error::Config("sequence_id must be non-empty".into()));
        }
        if self.n_frames < 2 * k.max(1) {
            return Err(Error::Config(format!(
                "{}: n_frames = {} must be at least 2k = {}",
                self.sequence_id,
                self.n_frames,
                2 * k.max(1)
            )));
        }
        if self.n_frames > u32::MAX as usize {
            return Err(Error::Config("n_frames does not fit in u32".into()));
        }
        if !(0.0..=1.0).contains(&self.revisit_fraction) {
            return Err(Error::Config(format!(
                "{}: revisit_fraction must be in [0, 1], got {}",
                self.sequence_id, self.revisit_fraction
            )));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::Config("descriptor_dim must be at least 1".into()));
        }
        for (name, v) in [
            ("feature_bandwidth", self.feature_bandwidth),
            ("noise_sigma", self.noise_sigma),
            ("heading_coupling", self.heading_coupling),
            ("alias_rate", self.alias_rate),
            ("alias_mix", self.alias_mix),
            ("revisit_offset", self.revisit_offset),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{}: {name} must be a non-negative number, got {v}",
                    self.sequence_id
                )));
            }
        }
        for (name, v) in [
            ("heading_coupling", self.heading_coupling),
            ("alias_rate", self.alias_rate),
            ("alias_mix", self.alias_mix),
        ] {
            if v > 1.0 {
                return Err(Error::Config(format!(
                    "{}: {name} must be at most 1",
                    self.sequence_id
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic descriptor extractor.
#[derive(Clone, Debug)]
pub struct Sensor {
    dim: usize,
    normalize: bool,
    heading_coupling: f64,
    // place features: cos and sin of omega . p
    omegas: Vec<[f64; 2]>,
    odd_phase: f64,
    // heading features: cos(n h + phi) with odd n, so h + pi flips the sign
    heading_freq: Vec<f64>,
    heading_phase: Vec<f64>,
}

const ALIAS_STREAM: u64 = 0xa11a_5a11_a5a1_1a5a;

impl Sensor {
    pub fn new(cfg: &WorldConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sensor_seed);
        let d = cfg.descriptor_dim;
        let bw = cfg.feature_bandwidth;
        let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
        let omegas: Vec<[f64; 2]> = (0..d.div_ceil(2)).map(|_| [bw * gauss(), bw * gauss()]).collect();
        let odd_phase = rng.random_range(0.0..TAU);
        let heading_freq = (0..d).map(|_| [1.0, 3.0][rng.random_range(0..2)]).collect();
        let heading_phase = (0..d).map(|_| rng.random_range(0.0..TAU)).collect();
        Self {
            dim: d,
            normalize: cfg.normalize,
            heading_coupling: cfg.heading_coupling,
            omegas,
            odd_phase,
            heading_freq,
            heading_phase,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit-norm place features of a 2D position.
    pub fn place_features(&self, p: [f64; 2]) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.dim);
        for w in &self.omegas {
            let a = w[0] * p[0] + w[1] * p[1];
            f.push(a.cos());
            if f.len() < self.dim {
                f.push(a.sin());
            }
        }
        if self.dim % 2 == 1 {
            // the unpaired cosine gets a phase so it is not always 1 at the origin
            let w = self.omegas[self.dim / 2];
            f[self.dim - 1] = (w[0] * p[0] + w[1] * p[1] + self.odd_phase).cos();
        }
        normalize_in_place(&mut f);
        f
    }

    /// Unit vector that changes sign when the heading is reversed.
    pub fn heading_features(&self, heading: f64) -> Vec<f64> {
        let mut g: Vec<f64> = self
            .heading_freq
            .iter()
            .zip(&self.heading_phase)
            .map(|(n, phi)| (n * heading + phi).cos())
            .collect();
        normalize_in_place(&mut g);
        g
    }

    /// Noise-free descriptor at position `p` seen with travel direction `heading`.
    pub fn clean_descriptor(&self, p: [f64; 2], heading: f64) -> Vec<f64> {
        let mut x = self.place_features(p);
        if self.heading_coupling > 0.0 {
            let g = self.heading_features(heading);
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi += self.heading_coupling * gi;
            }
        }
        if self.normalize {
            normalize_in_place(&mut x);
        }
        x
    }
}

fn normalize_in_place(x: &mut [f64]) {
    let n = l2_norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

/// Closed route of unit scale as a dense polyline.
fn route_shape(route: Route) -> Vec<[f64; 2]> {
    const SAMPLES: usize = 20_000;
    match route {
        Route::Circuit => (0..SAMPLES)
            .map(|i| {
                let t = TAU * i as f64 / SAMPLES as f64;
                let r = 1.0 + 0.15 * (3.0 * t).sin() + 0.05 * (5.0 * t).cos();
                [1.4 * r * t.cos(), r * t.sin()]
            })
            .collect(),
        Route::FigureEight => (0..SAMPLES)
            .map(|i| {
                let t = TAU * i as f64 / SAMPLES as f64;
                [t.sin(), 0.6 * (2.0 * t).sin()]
            })
            .collect(),
        Route::Grid => {
            // serpentine over four avenues, back along a frontage road
            let corners = [
                [0.0, 0.0],
                [0.0, 3.0],
                [1.0, 3.0],
                [1.0, 0.0],
                [2.0, 0.0],
                [2.0, 3.0],
                [3.0, 3.0],
                [3.0, -0.5],
                [0.0, -0.5],
            ];
            let mut pts = Vec::new();
            for (i, a) in corners.iter().enumerate() {
                let b = corners[(i + 1) % corners.len()];
                let steps = 1000;
                for s in 0..steps {
                    let u = s as f64 / steps as f64;
                    pts.push([a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]);
                }
            }
            pts
        }
    }
}

/// Arc-length lookup on a closed polyline scaled to a given perimeter.
struct ArcRoute {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
    length: f64,
}

impl ArcRoute {
    fn new(route: Route, perimeter: f64) -> Self {
        let shape = route_shape(route);
        let mut cum = Vec::with_capacity(shape.len() + 1);
        cum.push(0.0);
        for i in 0..shape.len() {
            let a = shape[i];
            let b = shape[(i + 1) % shape.len()];
            cum.push(cum[i] + (b[0] - a[0]).hypot(b[1] - a[1]));
        }
        let scale = perimeter / cum[shape.len()];
        Self {
            pts: shape.iter().map(|p| [p[0] * scale, p[1] * scale]).collect(),
            cum: cum.iter().map(|c| c * scale).collect(),
            length: perimeter,
        }
    }

    /// Position and forward heading at arc length `s`.
    fn at(&self, s: f64) -> ([f64; 2], f64) {
        let s = s.rem_euclid(self.length);
        let i = self.cum.partition_point(|&c| c <= s).saturating_sub(1).min(self.pts.len() - 1);
        let a = self.pts[i];
        let b = self.pts[(i + 1) % self.pts.len()];
        let seg = self.cum[i + 1] - self.cum[i];
        let u = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        let p = [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
        (p, (b[1] - a[1]).atan2(b[0] - a[0]))
    }
}

fn terrain_height(p: [f64; 2]) -> f64 {
    3.0 * (p[0] / 230.0).sin() * (p[1] / 170.0).cos()
}

/// Frame positions, headings and the per-frame noise-free pose of a route.
pub fn route_poses(cfg: &WorldConfig) -> Vec<(Pose, f64)> {
    let n = cfg.n_frames;
    let revisit = (cfg.revisit_fraction * n as f64).round() as usize;
    let first_lap = (n - revisit).max(1);
    let route = ArcRoute::new(cfg.route, first_lap as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let theta = rng.random_range(0.0..TAU);
    let offset = [rng.random_range(-5e3..5e3), rng.random_range(-5e3..5e3)];
    let (sin_t, cos_t) = theta.sin_cos();
    let place = |p: [f64; 2]| {
        [
            cos_t * p[0] - sin_t * p[1] + offset[0],
            sin_t * p[0] + cos_t * p[1] + offset[1],
        ]
    };

    (0..n)
        .map(|i| {
            let (s, backwards) = if i < first_lap {
                (i as f64, false)
            } else {
                let j = (i - first_lap) as f64;
                match cfg.revisit_direction {
                    RevisitDirection::Same => (first_lap as f64 + j, false),
                    RevisitDirection::Opposite => (first_lap as f64 - j, true),
                }
            };
            let (mut p, h) = route.at(s);
            if i >= first_lap {
                let side = if backwards { -1.0 } else { 1.0 };
                p[0] -= side * cfg.revisit_offset * h.sin();
                p[1] += side * cfg.revisit_offset * h.cos();
            }
            let p = place(p);
            let heading = h + theta + if backwards { PI } else { 0.0 };
            ([p[0], p[1], terrain_height(p)], heading)
        })
        .collect()
}

/// Generates one sequence. Deterministic in `(cfg.seed, cfg.sensor_seed)`.
pub fn generate_world(cfg: &WorldConfig) -> Result<DescriptorDatabase> {
    cfg.validate(1)?;
    let sensor = Sensor::new(cfg);
    let poses_h = route_poses(cfg);
    let d = cfg.descriptor_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut alias_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ALIAS_STREAM);
    let mut data = Vec::with_capacity(cfg.n_frames * d);
    for (pose, heading) in &poses_h {
        let mut x = sensor.clean_descriptor([pose[0], pose[1]], *heading);
        if cfg.alias_rate > 0.0 && alias_rng.random::<f64>() < cfg.alias_rate {
            let other = poses_h[alias_rng.random_range(0..poses_h.len())].0;
            let a = sensor.clean_descriptor([other[0], other[1]], *heading);
            for (xi, ai) in x.iter_mut().zip(&a) {
                *xi = (1.0 - cfg.alias_mix) * *xi + cfg.alias_mix * ai;
            }
            if cfg.normalize {
                normalize_in_place(&mut x);
            }
        }
        data.extend(x.into_iter().map(|v| {
            if cfg.noise_sigma > 0.0 {
                v + noise.sample(&mut rng)
            } else {
                v
            }
        }));
    }
    DescriptorDatabase::new(
        cfg.sequence_id.clone(),
        poses_h.iter().map(|(p, _)| *p).collect(),
        Mat::from_vec(cfg.n_frames, d, data)?,
        (0..cfg.n_frames as u32).collect(),
    )
}

/// Five sequences sharing one sensor: four easy ones and a hard `s08` with
/// heading-dependent descriptors and opposite-direction revisits.
pub fn default_suite(seed: u64) -> Vec<WorldConfig> {
    let base = WorldConfig {
        sensor_seed: seed,
        alias_rate: 0.1,
        alias_mix: 0.6,
        noise_sigma: 0.05,
        ..WorldConfig::default()
    };
    let easy = [
        ("s00", Route::Circuit, 4051, 0.27),
        ("s02", Route::Grid, 4000, 0.2),
        ("s05", Route::FigureEight, 4000, 0.25),
        ("s06", Route::Circuit, 3600, 0.3),
    ];
    let mut suite: Vec<WorldConfig> = easy
        .iter()
        .enumerate()
        .map(|(i, &(id, route, n, r))| WorldConfig {
            sequence_id: id.into(),
            route,
            n_frames: n,
            revisit_fraction: r,
            seed: seed.wrapping_mul(31).wrapping_add(i as u64 + 1),
            ..base.clone()
        })
        .collect();
    suite.push(WorldConfig {
        sequence_id: "s08".into(),
        route: Route::FigureEight,
        n_frames: 4000,
        revisit_fraction: 0.3,
        revisit_direction: RevisitDirection::Opposite,
        heading_coupling: 0.5,
        seed: seed.wrapping_mul(31).wrapping_add(8),
        ..base
    });
    suite
}

/// Splits off the sequence named `holdout` as the test set.
pub fn split_sequences(
    dbs: Vec<DescriptorDatabase>,
    holdout: &str,
) -> Result<(Vec<DescriptorDatabase>, DescriptorDatabase)> {
    let mut seen = HashSet::new();
    for db in &dbs {
        if !seen.insert(db.sequence_id().to_owned()) {
            return Err(Error::Parameter(format!(
                "sequence id {} appears more than once",
                db.sequence_id()
            )));
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = dbs.into_iter().partition(|db| db.sequence_id() == holdout);
    let test = test.into_iter().next().ok_or_else(|| {
        Error::Parameter(format!("holdout sequence {holdout:?} is not in the input"))
    })?;
    Ok((train, test))
}

pub fn encode_dataset(db: &DescriptorDatabase) -> Vec<u8> {
    let id = db.sequence_id().as_bytes();
    let n = db.len();
    let d = db.dim();
    let mut out = Vec::with_capacity(18 + id.len() + n * (3 + d) * 8 + n * 4 + 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    for p in db.poses() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in db.descriptors().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in db.frame_ids() {
        out.extend_from_slice(&f.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            )),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what} size overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<DescriptorDatabase> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::format(0, "not a dataset file (bad magic)"));
    }
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported dataset version {version}")));
    }
    let n = r.u32("frame count")? as usize;
    let d = r.u32("descriptor dim")? as usize;
    let id_len = r.u32("sequence id length")? as usize;
    let id_at = r.pos;
    let id = std::str::from_utf8(r.take(id_len, "sequence id")?)
        .map_err(|_| Error::format(id_at as u64, "sequence id is not UTF-8"))?
        .to_owned();
    let body = n
        .checked_mul(3 + d)
        .and_then(|x| x.checked_mul(8))
        .and_then(|x| x.checked_add(n * 4 + 4))
        .ok_or_else(|| Error::format(14, "frame count and dim overflow"))?;
    if r.buf.len() - r.pos < body {
        return Err(Error::format(
            r.pos as u64,
            format!(
                "truncated: header declares {n} frames of dim {d} ({body} bytes), {} present",
                r.buf.len() - r.pos
            ),
        ));
    }
    let flat = r.f64s(3 * n, "poses")?;
    let desc = r.f64s(n * d, "descriptors")?;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        frames.push(r.u32("frame ids")?);
    }
    let crc_at = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != buf.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes", buf.len() - r.pos),
        ));
    }
    let actual = crc32fast::hash(&buf[..crc_at]);
    if stored != actual {
        return Err(Error::format(
            crc_at as u64,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let poses = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    DescriptorDatabase::new(id, poses, Mat::from_vec(n, d, desc)?, frames)
        .map_err(|e| Error::format(0, format!("invalid dataset contents: {e}")))
}

pub fn save_dataset(db: &DescriptorDatabase, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_dataset(db))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DescriptorDatabase> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::squared_distance;
    use proptest::prelude::*;

    fn small(seed: u64) -> WorldConfig {
        WorldConfig {
            n_frames: 400,
            descriptor_dim: 16,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn validation() {
        let ok = WorldConfig::default();
        assert!(ok.validate(25).is_ok());
        let bad = |f: fn(&mut WorldConfig)| {
            let mut c = ok.clone();
            f(&mut c);
            assert!(matches!(c.validate(25), Err(Error::Config(_))), "{c:?}");
        };
        bad(|c| c.revisit_fraction = 1.5);
        bad(|c| c.n_frames = 49);
        bad(|c| c.noise_sigma = -0.1);
        bad(|c| c.feature_bandwidth = f64::NAN);
        bad(|c| c.descriptor_dim = 0);
        bad(|c| c.heading_coupling = 1.5);
        bad(|c| c.alias_rate = 1.5);
        bad(|c| c.alias_mix = -0.5);
        bad(|c| c.alias_mix = 2.0);
        assert!(generate_world(&WorldConfig {
            revisit_fraction: -0.1,
            ..small(0)
        })
        .is_err());
    }

    #[test]
    fn frames_are_about_one_metre_apart() {
        for route in [Route::Circuit, Route::FigureEight, Route::Grid] {
            let cfg = WorldConfig {
                route,
                n_frames: 2000,
                ..small(3)
            };
            let poses = route_poses(&cfg);
            let mut total = 0.0;
            for w in poses.windows(2) {
                let (a, b) = (w[0].0, w[1].0);
                let planar = (a[0] - b[0]).hypot(a[1] - b[1]);
                // a chord across a grid corner is shorter than the arc
                assert!(planar < 1.0 + 1e-6 && planar > 0.7, "{route:?}: step {planar}");
                total += planar;
            }
            let mean = total / (poses.len() - 1) as f64;
            assert!(mean > 0.995, "{route:?}: mean step {mean}");
        }
    }

    #[test]
    fn revisits_cover_the_requested_share() {
        for dir in [RevisitDirection::Same, RevisitDirection::Opposite] {
            let cfg = WorldConfig {
                n_frames: 1000,
                revisit_fraction: 0.3,
                revisit_direction: dir,
                ..small(1)
            };
            let poses = route_poses(&cfg);
            let near_old = |i: usize| {
                (0..700).any(|j| {
                    let (a, b) = (poses[i].0, poses[j].0);
                    (a[0] - b[0]).hypot(a[1] - b[1]) < 0.5
                })
            };
            assert!((700..1000).all(near_old), "{dir:?}");
            let (h_old, h_new) = match dir {
                RevisitDirection::Same => (poses[10].1, poses[710].1),
                RevisitDirection::Opposite => (poses[689].1, poses[711].1),
            };
            let turn = (h_new - h_old).rem_euclid(TAU);
            let expected = if dir == RevisitDirection::Same { 0.0 } else { PI };
            let diff = (turn - expected).abs().min(TAU - (turn - expected).abs());
            assert!(diff < 0.2, "{dir:?}: heading change {turn}");
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_world(&small(7)).unwrap();
        let b = generate_world(&small(7)).unwrap();
        assert_eq!(encode_dataset(&a), encode_dataset(&b));
        let c = generate_world(&small(8)).unwrap();
        assert_ne!(a.descriptors(), c.descriptors());
        let e = generate_world(&WorldConfig { sensor_seed: 1, ..small(7) }).unwrap();
        assert_ne!(a.descriptors(), e.descriptors());
        assert!(a.descriptors().is_finite());
    }

    #[test]
    fn same_pose_without_noise_gives_identical_descriptors() {
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            ..small(2)
        };
        let s = Sensor::new(&cfg);
        assert_eq!(s.clean_descriptor([12.5, -3.0], 0.4), s.clean_descriptor([12.5, -3.0], 0.4));

        // the revisit lap passes the start again
        let db = generate_world(&WorldConfig {
            n_frames: 500,
            revisit_fraction: 0.2,
            ..cfg
        })
        .unwrap();
        assert!(squared_distance(db.descriptor(0), db.descriptor(400)) < 1e-12);
    }

    #[test]
    fn clean_descriptors_are_unit_norm() {
        for (coupling, alias_rate, dim) in [(0.0, 0.0, 16), (0.7, 0.0, 9), (0.3, 0.5, 32)] {
            let cfg = WorldConfig {
                heading_coupling: coupling,
                alias_rate,
                descriptor_dim: dim,
                noise_sigma: 0.0,
                ..small(0)
            };
            let s = Sensor::new(&cfg);
            for i in 0..50 {
                let x = s.clean_descriptor([i as f64 * 13.0, i as f64 * -7.0], i as f64);
                assert!((l2_norm(&x) - 1.0).abs() < 1e-12);
            }
            let db = generate_world(&cfg).unwrap();
            for i in 0..db.len() {
                assert!((l2_norm(db.descriptor(i)) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aliased_frames_borrow_another_place() {
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            alias_rate: 0.3,
            alias_mix: 1.0,
            ..small(4)
        };
        let db = generate_world(&cfg).unwrap();
        let s = Sensor::new(&cfg);
        let clean: Vec<Vec<f64>> = db.poses().iter().map(|p| s.place_features([p[0], p[1]])).collect();
        let mut aliased = 0;
        for i in 0..db.len() {
            if squared_distance(db.descriptor(i), &clean[i]) > 1e-12 {
                aliased += 1;
                assert!(clean.iter().any(|c| squared_distance(db.descriptor(i), c) < 1e-12));
            }
        }
        let share = aliased as f64 / db.len() as f64;
        assert!((share - 0.3).abs() < 0.07, "{share}");

        let none = generate_world(&WorldConfig { alias_rate: 0.0, ..cfg.clone() }).unwrap();
        let half = generate_world(&WorldConfig { alias_mix: 0.5, ..cfg }).unwrap();
        for i in 0..db.len() {
            let moved = squared_distance(db.descriptor(i), none.descriptor(i)) > 1e-12;
            assert_eq!(moved, squared_distance(half.descriptor(i), none.descriptor(i)) > 1e-12);
        }
    }

    #[test]
    fn descriptor_distance_grows_with_pose_distance() {
        let (mut near, mut far) = (0.0, 0.0);
        for seed in 0..100 {
            let cfg = WorldConfig {
                sensor_seed: seed,
                noise_sigma: 0.0,
                ..WorldConfig::default()
            };
            let s = Sensor::new(&cfg);
            let p = [seed as f64 * 37.0, seed as f64 * -11.0];
            let x = s.place_features(p);
            near += squared_distance(&x, &s.place_features([p[0] + 1.0, p[1]])).sqrt();
            far += squared_distance(&x, &s.place_features([p[0] + 100.0, p[1]])).sqrt();
        }
        assert!(near < far, "{near} !< {far}");

        // expected squared distance follows 2 - 2 exp(-(bw r)^2 / 2)
        let mut prev = 0.0;
        for r in [1.0, 5.0, 10.0, 20.0, 40.0] {
            let mut mean = 0.0;
            for seed in 0..200 {
                let s = Sensor::new(&WorldConfig {
                    sensor_seed: seed,
                    descriptor_dim: 64,
                    ..WorldConfig::default()
                });
                mean += squared_distance(&s.place_features([0.0, 0.0]), &s.place_features([r, 0.0]));
            }
            mean /= 200.0;
            let expected = 2.0 - 2.0 * (-(0.05 * r).powi(2) / 2.0).exp();
            assert!((mean - expected).abs() < 0.05, "r = {r}: {mean} vs {expected}");
            assert!(mean > prev);
            prev = mean;
        }
    }

    #[test]
    fn reversed_heading_exceeds_noise_floor() {
        let cfg = WorldConfig {
            heading_coupling: 1.0,
            noise_sigma: 0.05,
            ..WorldConfig::default()
        };
        let s = Sensor::new(&cfg);
        let noise = Normal::new(0.0, cfg.noise_sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut noisy = |x: &[f64]| -> Vec<f64> { x.iter().map(|v| v + noise.sample(&mut rng)).collect() };
        for i in 0..50 {
            let p = [i as f64 * 23.0, 5.0];
            let h = i as f64 * 0.7;
            let same = squared_distance(&noisy(&s.clean_descriptor(p, h)), &noisy(&s.clean_descriptor(p, h)));
            let opposite = squared_distance(
                &noisy(&s.clean_descriptor(p, h)),
                &noisy(&s.clean_descriptor(p, h + PI)),
            );
            assert!(opposite > same, "{opposite} <= {same}");
        }
    }

    #[test]
    fn default_suite_shape() {
        let suite = default_suite(0);
        assert_eq!(suite.len(), 5);
        let hard: Vec<_> = suite.iter().filter(|c| c.heading_coupling >= 0.5).collect();
        assert_eq!(hard.len(), 1);
        assert_eq!(hard[0].sequence_id, "s08");
        assert_eq!(hard[0].revisit_direction, RevisitDirection::Opposite);
        assert!(suite.iter().all(|c| c.validate(25).is_ok()));
        assert!(suite.iter().all(|c| c.sensor_seed == 0));
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let db = generate_world(&small(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.trrd");
        save_dataset(&db, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, db);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(encode_dataset(&back), bytes);

        let header = 18 + db.sequence_id().len();
        let mut flipped = bytes.clone();
        flipped[header + 3 * 8 * db.len() + 5] ^= 0x10;
        match decode_dataset(&flipped) {
            Err(Error::Format { reason, offset }) => {
                assert!(reason.contains("checksum"), "{reason}");
                assert_eq!(offset as usize, bytes.len() - 4);
            }
            other => panic!("{other:?}"),
        }

        let mut more = bytes.clone();
        more[6..10].copy_from_slice(&(db.len() as u32 + 1).to_le_bytes());
        match decode_dataset(&more) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("truncated"), "{reason}"),
            other => panic!("{other:?}"),
        }

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_dataset(&magic), Err(Error::Format { offset: 0, .. })));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(decode_dataset(&version), Err(Error::Format { offset: 4, .. })));
        for cut in [0, 3, 10, header, bytes.len() - 1] {
            assert!(matches!(decode_dataset(&bytes[..cut]), Err(Error::Format { .. })));
        }
    }

    fn db_named(id: &str, n: usize) -> DescriptorDatabase {
        DescriptorDatabase::new(
            id,
            vec![[0.0; 3]; n],
            Mat::zeros(n, 2),
            (0..n as u32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_examples() {
        let ids = ["s00", "s02", "s05", "s06", "s08"];
        let dbs: Vec<_> = ids.iter().enumerate().map(|(i, id)| db_named(id, 10 + i)).collect();
        let (train, test) = split_sequences(dbs.clone(), "s08").unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.sequence_id(), "s08");
        let mut union: Vec<_> = train.clone();
        union.push(test);
        union.sort_by(|a, b| a.sequence_id().cmp(b.sequence_id()));
        assert_eq!(union, dbs);
        assert!(matches!(split_sequences(dbs.clone(), "s99"), Err(Error::Parameter(_))));
        let mut dup = dbs;
        dup.push(db_named("s00", 3));
        assert!(matches!(split_sequences(dup, "s08"), Err(Error::Parameter(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode_dataset(&bytes);
        }

        #[test]
        fn any_single_byte_flip_is_rejected(pos in 0usize..10_000, bit in 0u8..8) {
            let db = generate_world(&WorldConfig { n_frames: 60, descriptor_dim: 4, ..Default::default() }).unwrap();
            let mut bytes = encode_dataset(&db);
            let pos = pos % bytes.len();
            bytes[pos] ^= 1 << bit;
            prop_assert!(decode_dataset(&bytes).is_err());
        }
    }
}
