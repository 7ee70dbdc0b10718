//! Configuration samplers: Bernoulli site percolation, Gaussian free field
//! level sets, random-interlacement trace surrogates and their vacant sets.
//!
//! All randomness is counter-based and keyed on `(seed, stream, index)`, so
//! a `ModelSpec` determines its `Config` bit for bit regardless of thread
//! count, and pairs of parameters sampled from the same seed are pointwise
//! monotone-coupled for free (shared uniforms / shared field / shared walk).
//!
//! Finite-volume surrogates (documented design decisions):
//! - the interlacement set at level `u` is the trace of a single simple
//!   random walk on the torus run for `floor(u * N^d)` steps;
//! - the free field is synthesized spectrally on the torus with the zero
//!   mode removed, which is its exact finite-torus law.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::cluster;
use crate::error::{parameter, usage, Error, Result};
use crate::lattice::{Point, Window};
use crate::rng::{stream, substream, CounterRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Bernoulli,
    GffLevel,
    Interlacement,
    VacantInterlacement,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Bernoulli => "bernoulli",
            ModelKind::GffLevel => "gff-level",
            ModelKind::Interlacement => "interlacement",
            ModelKind::VacantInterlacement => "vacant-interlacement",
        }
    }

    /// Whether the occupied set grows with the parameter.
    pub fn increasing_in_u(&self) -> bool {
        matches!(self, ModelKind::Bernoulli | ModelKind::Interlacement)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(ModelKind::Bernoulli),
            "gff-level" => Ok(ModelKind::GffLevel),
            "interlacement" => Ok(ModelKind::Interlacement),
            "vacant-interlacement" => Ok(ModelKind::VacantInterlacement),
            other => Err(parameter(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Everything needed to reproduce one configuration.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub u: f64,
    pub window: Window,
    pub seed: u64,
    /// Allows sampling the zero-mode-removed field in d = 2 as a documented
    /// finite-volume surrogate (the infinite-volume Green function diverges).
    pub gff_d2_override: bool,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, u: f64, window: Window, seed: u64) -> ModelSpec {
        ModelSpec {
            kind,
            u,
            window,
            seed,
            gff_d2_override: false,
        }
    }

    pub fn with_u(&self, u: f64) -> ModelSpec {
        let mut s = self.clone();
        s.u = u;
        s
    }

    pub fn with_seed(&self, seed: u64) -> ModelSpec {
        let mut s = self.clone();
        s.seed = seed;
        s
    }

    fn validate(&self) -> Result<()> {
        let d = self.window.dim();
        match self.kind {
            ModelKind::Bernoulli => {
                if !(0.0..=1.0).contains(&self.u) {
                    return Err(parameter(format!(
                        "bernoulli parameter must be in [0,1], got {}",
                        self.u
                    )));
                }
            }
            ModelKind::GffLevel => {
                if !self.window.wrap() {
                    return Err(parameter("gff-level sampling requires a wrapped window"));
                }
                if d < 3 && !self.gff_d2_override {
                    return Err(parameter(
                        "gff-level requires d >= 3 (set the d=2 override for the \
                         zero-mode-removed torus surrogate)",
                    ));
                }
            }
            ModelKind::Interlacement | ModelKind::VacantInterlacement => {
                if d < 3 {
                    return Err(parameter("interlacement kinds require d >= 3"));
                }
                if !self.window.wrap() {
                    return Err(parameter("interlacement sampling requires a wrapped window"));
                }
                if self.u < 0.0 {
                    return Err(parameter("interlacement level must be >= 0"));
                }
            }
        }
        Ok(())
    }
}

/// An occupancy field over a window. `S(omega)` is the set of sites with
/// bit 1.
#[derive(Clone)]
pub struct Config {
    window: Window,
    bits: Vec<u64>,
    pub provenance: ModelSpec,
}

impl Config {
    pub fn from_bits(window: Window, occupied: impl Fn(usize) -> bool, provenance: ModelSpec) -> Config {
        let n = window.site_count();
        let mut bits = vec![0u64; n.div_ceil(64)];
        for i in 0..n {
            if occupied(i) {
                bits[i / 64] |= 1 << (i % 64);
            }
        }
        Config {
            window,
            bits,
            provenance,
        }
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    #[inline]
    pub fn occupied_index(&self, idx: usize) -> bool {
        (self.bits[idx / 64] >> (idx % 64)) & 1 == 1
    }

    /// Occupancy of a point; false outside a hard window.
    pub fn occupied(&self, p: &Point) -> bool {
        match self.window.index(p) {
            Some(i) => self.occupied_index(i),
            None => false,
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied_count() as f64 / self.window.site_count() as f64
    }

    /// Pointwise domination: every occupied site of `self` occupied in `other`.
    pub fn subset_of(&self, other: &Config) -> bool {
        self.bits
            .iter()
            .zip(&other.bits)
            .all(|(a, b)| a & !b == 0)
    }
}

/// Samples a configuration of any kind.
pub fn sample(spec: &ModelSpec) -> Result<Config> {
    spec.validate()?;
    match spec.kind {
        ModelKind::Bernoulli => sample_bernoulli(spec),
        ModelKind::GffLevel => sample_gff_level_set(spec),
        ModelKind::Interlacement | ModelKind::VacantInterlacement => sample_interlacement(spec),
    }
}

/// Independent site occupancy with probability `u`, one uniform per site.
pub fn sample_bernoulli(spec: &ModelSpec) -> Result<Config> {
    spec.validate()?;
    if spec.kind != ModelKind::Bernoulli {
        return Err(usage("sample_bernoulli called with a non-bernoulli spec"));
    }
    let rng = CounterRng::new(spec.seed, stream::SITES);
    let u = spec.u;
    Ok(Config::from_bits(
        spec.window.clone(),
        |i| rng.uniform_at(i as u64) < u,
        spec.clone(),
    ))
}

/// Discrete Gaussian free field on the torus via spectral synthesis with the
/// zero mode projected out; occupies the superlevel set `phi >= u`.
pub fn sample_gff_level_set(spec: &ModelSpec) -> Result<Config> {
    spec.validate()?;
    if spec.kind != ModelKind::GffLevel {
        return Err(usage("sample_gff_level_set called with a non-gff spec"));
    }
    let phi = gaussian_field(&spec.window, spec.seed)?;
    let u = spec.u;
    Ok(Config::from_bits(
        spec.window.clone(),
        |i| phi[i] >= u,
        spec.clone(),
    ))
}

/// Trace of a single torus walk of `floor(u * N^d)` steps (vacant kind
/// returns the complement).
pub fn sample_interlacement(spec: &ModelSpec) -> Result<Config> {
    spec.validate()?;
    if !matches!(
        spec.kind,
        ModelKind::Interlacement | ModelKind::VacantInterlacement
    ) {
        return Err(usage("sample_interlacement called with a non-interlacement spec"));
    }
    let w = &spec.window;
    let count = w.site_count();
    let steps = (spec.u * count as f64).floor() as u64;
    let start_rng = CounterRng::new(spec.seed, stream::ITL_START);
    let step_rng = CounterRng::new(spec.seed, stream::ITL_STEPS);
    let d = w.dim();

    let mut visited = vec![false; count];
    let mut pos = start_rng.below_at(0, count as u64) as usize;
    visited[pos] = true;
    for j in 0..steps {
        let dir = step_rng.below_at(j, 2 * d as u64) as usize;
        let (axis, sign) = (dir / 2, if dir % 2 == 0 { 1 } else { -1 });
        // wrapped window: neighbor always exists
        pos = w.neighbor_index(pos, axis, sign).expect("torus neighbor");
        visited[pos] = true;
    }

    let vacant = spec.kind == ModelKind::VacantInterlacement;
    Ok(Config::from_bits(
        w.clone(),
        |i| visited[i] != vacant,
        spec.clone(),
    ))
}

/// Two configurations from one random source with the pointwise monotone
/// coupling of the model family: for increasing kinds the low-parameter set
/// is contained in the high one; for gff-level and vacant kinds the
/// high-parameter set is contained in the low one.
pub fn coupled_pair(spec: &ModelSpec, u_low: f64, u_high: f64) -> Result<(Config, Config)> {
    if !(u_low <= u_high) {
        return Err(usage(format!(
            "coupled_pair: parameters out of order ({u_low} > {u_high})"
        )));
    }
    let low = sample(&spec.with_u(u_low))?;
    let high = sample(&spec.with_u(u_high))?;
    Ok((low, high))
}

/// Monte-Carlo estimate of the cluster density `eta(u)`: the fraction of
/// replicas in which the origin lies in the infinite-cluster surrogate (the
/// largest component of the window).
#[derive(Clone, Copy, Debug)]
pub struct EtaEstimate {
    pub value: f64,
    pub stderr: f64,
    pub replicas: u32,
}

pub fn estimate_eta(spec: &ModelSpec, replicas: u32) -> Result<EtaEstimate> {
    if replicas == 0 {
        return Err(usage("estimate_eta needs at least one replica"));
    }
    let mut hits = 0u32;
    for rep in 0..replicas {
        let cfg = sample(&spec.with_seed(substream(spec.seed, stream::REPLICA, rep as u64)))?;
        if origin_in_surrogate(&cfg)? {
            hits += 1;
        }
    }
    let value = hits as f64 / replicas as f64;
    Ok(EtaEstimate {
        value,
        stderr: (value * (1.0 - value) / replicas as f64).sqrt(),
        replicas,
    })
}

fn origin_in_surrogate(cfg: &Config) -> Result<bool> {
    let labeling = cluster::label_components(cfg);
    match cluster::largest_component(cfg, &labeling, &cfg.window().bounding_box()) {
        Ok(best) => {
            let origin = Point::origin(cfg.window().dim());
            Ok(labeling.label_of(&origin) == Some(best.component))
        }
        Err(Error::Usage(_)) => Ok(false), // empty configuration
        Err(e) => Err(e),
    }
}

/// Zero-mode-removed Gaussian free field sample on the torus, one value per
/// site index. Per-mode variance is `1 / lambda_k` with
/// `lambda_k = sum_a 4 sin^2(pi k_a / N)`.
pub fn gaussian_field(window: &Window, seed: u64) -> Result<Vec<f64>> {
    if !window.wrap() {
        return Err(parameter("gaussian_field requires a wrapped window"));
    }
    let n = window.side() as usize;
    let d = window.dim();
    let count = window.site_count();

    let rng = CounterRng::new(seed, stream::GFF_NOISE);
    let mut data: Vec<Complex<f64>> = (0..count)
        .map(|i| Complex::new(rng.normal_at(i as u64), 0.0))
        .collect();

    fft_all_axes(&mut data, n, d, false);

    // multiply by 1/sqrt(lambda_k); zero mode dropped
    let mut lambda_axis = vec![0.0f64; n];
    for (k, l) in lambda_axis.iter_mut().enumerate() {
        let s = (std::f64::consts::PI * k as f64 / n as f64).sin();
        *l = 4.0 * s * s;
    }
    for (idx, v) in data.iter_mut().enumerate() {
        let mut lambda = 0.0;
        let mut rest = idx;
        for _ in 0..d {
            lambda += lambda_axis[rest % n];
            rest /= n;
        }
        if lambda == 0.0 {
            *v = Complex::new(0.0, 0.0);
        } else {
            *v /= lambda.sqrt();
        }
    }

    fft_all_axes(&mut data, n, d, true);

    let norm = 1.0 / count as f64;
    Ok(data.iter().map(|c| c.re * norm).collect())
}

/// In-place FFT along every axis of a row-major `n^d` array.
fn fft_all_axes(data: &mut [Complex<f64>], n: usize, d: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let count = data.len();
    let mut lane = vec![Complex::new(0.0, 0.0); n];
    for axis in 0..d {
        // stride of this axis in the row-major layout (axis 0 slowest)
        let stride = n.pow((d - 1 - axis) as u32);
        let block = stride * n;
        for base in 0..count / block {
            for offset in 0..stride {
                let start = base * block + offset;
                for (j, l) in lane.iter_mut().enumerate() {
                    *l = data[start + j * stride];
                }
                fft.process(&mut lane);
                for (j, l) in lane.iter().enumerate() {
                    data[start + j * stride] = *l;
                }
            }
        }
    }
}

// --- raster serialization -------------------------------------------------

const RASTER_MAGIC: &str = "perclab-config 1";

/// Writes the documented textual raster: a header with d, N, wrap, kind, u
/// and seed, then the occupancy bits row-major (last axis fastest), N chars
/// per line. Round-trips bit-exactly.
pub fn write_config(cfg: &Config, out: &mut impl std::io::Write) -> Result<()> {
    let w = cfg.window();
    writeln!(out, "{RASTER_MAGIC}")?;
    writeln!(
        out,
        "d={} n={} wrap={} kind={} u={} seed={}",
        w.dim(),
        w.side(),
        w.wrap() as u8,
        cfg.provenance.kind.as_str(),
        cfg.provenance.u,
        cfg.provenance.seed,
    )?;
    let n = w.side() as usize;
    let mut line = String::with_capacity(n);
    for row in 0..w.site_count() / n {
        line.clear();
        for col in 0..n {
            line.push(if cfg.occupied_index(row * n + col) { '1' } else { '0' });
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_config(input: impl std::io::BufRead) -> Result<Config> {
    let mut lines = input.lines();
    let magic = lines
        .next()
        .ok_or_else(|| Error::Parse("empty raster".into()))??;
    if magic.trim() != RASTER_MAGIC {
        return Err(Error::Parse(format!("bad raster magic '{magic}'")));
    }
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("missing raster header".into()))??;
    let mut d = None;
    let mut n = None;
    let mut wrap = None;
    let mut kind = None;
    let mut u = None;
    let mut seed = None;
    for tok in header.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header token '{tok}'")))?;
        match k {
            "d" => d = Some(v.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?),
            "n" => n = Some(v.parse::<i64>().map_err(|e| Error::Parse(e.to_string()))?),
            "wrap" => wrap = Some(v == "1"),
            "kind" => kind = Some(v.parse::<ModelKind>()?),
            "u" => u = Some(v.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|e| Error::Parse(e.to_string()))?),
            other => return Err(Error::Parse(format!("unknown header key '{other}'"))),
        }
    }
    let (d, n, wrap) = match (d, n, wrap) {
        (Some(d), Some(n), Some(w)) => (d, n, w),
        _ => return Err(Error::Parse("incomplete raster header".into())),
    };
    let window = Window::new(n, d, wrap)?;
    let spec = ModelSpec::new(
        kind.ok_or_else(|| Error::Parse("missing kind".into()))?,
        u.ok_or_else(|| Error::Parse("missing u".into()))?,
        window.clone(),
        seed.ok_or_else(|| Error::Parse("missing seed".into()))?,
    );
    let side = n as usize;
    let rows = window.site_count() / side;
    let mut occ = vec![false; window.site_count()];
    for row in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse("raster truncated".into()))??;
        let line = line.trim_end();
        if line.len() != side {
            return Err(Error::Parse(format!(
                "raster row {row} has {} chars, expected {side}",
                line.len()
            )));
        }
        for (col, ch) in line.chars().enumerate() {
            occ[row * side + col] = match ch {
                '1' => true,
                '0' => false,
                _ => return Err(Error::Parse(format!("bad raster char '{ch}'"))),
            };
        }
    }
    Ok(Config::from_bits(window, |i| occ[i], spec))
}
