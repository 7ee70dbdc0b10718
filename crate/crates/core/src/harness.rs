//! Experiment harness: reproducible end-to-end runs tying the samplers,
//! renormalization, isoperimetry and walk diagnostics together, with CSV
//! and artifact emission.
//!
//! Reproducibility contract: all randomness flows from the single spec seed
//! through documented counter streams, so re-running an identical spec
//! yields byte-identical CSV files regardless of thread count. Wall-clock
//! timings appear only in `report.txt`, never in CSVs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::cluster;
use crate::error::{usage, Error, Result};
use crate::iso;
use crate::lattice::{linf_ball, LatticeBox, Point, Window};
use crate::renorm;
use crate::rng::{mix64, stream, substream, CounterRng};
use crate::sampler::{self, ModelKind, ModelSpec};
use crate::walk;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum CheckKind {
    Eta,
    BadProb,
    EventH,
    FatSet,
    IsoProfile,
    Reduction,
    WalkMsd,
    WalkCov,
    HeatKernel,
    Corrector,
    Predicates,
}

impl CheckKind {
    pub const ALL: [CheckKind; 11] = [
        CheckKind::Eta,
        CheckKind::BadProb,
        CheckKind::EventH,
        CheckKind::FatSet,
        CheckKind::IsoProfile,
        CheckKind::Reduction,
        CheckKind::WalkMsd,
        CheckKind::WalkCov,
        CheckKind::HeatKernel,
        CheckKind::Corrector,
        CheckKind::Predicates,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckKind::Eta => "eta",
            CheckKind::BadProb => "bad-prob",
            CheckKind::EventH => "event-h",
            CheckKind::FatSet => "fat-set",
            CheckKind::IsoProfile => "iso-profile",
            CheckKind::Reduction => "reduction",
            CheckKind::WalkMsd => "walk-msd",
            CheckKind::WalkCov => "walk-cov",
            CheckKind::HeatKernel => "heat-kernel",
            CheckKind::Corrector => "corrector",
            CheckKind::Predicates => "predicates",
        }
    }
}

impl std::str::FromStr for CheckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckKind::ALL
            .iter()
            .find(|c| c.as_str() == s)
            .copied()
            .ok_or_else(|| usage(format!("unknown check '{s}'")))
    }
}

/// Everything one run needs; fully serializable as flat key=value text.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub model: ModelKind,
    pub u: f64,
    pub dim: usize,
    pub side: i64,
    pub wrap: bool,
    pub seed: u64,
    pub eta: Option<f64>,
    pub l0: i64,
    pub r0: i64,
    pub big_l0: i64,
    pub theta_sc: u32,
    pub k_max: u32,
    pub radius: i64,
    pub theta_iso: f64,
    pub horizon_t: f64,
    pub steps: u64,
    pub heat_steps: u64,
    pub replicas: u32,
    pub budget: u32,
    pub checks: BTreeSet<CheckKind>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            model: ModelKind::Bernoulli,
            u: 0.7,
            dim: 2,
            side: 192,
            wrap: false,
            seed: 1,
            eta: None,
            l0: 9,
            r0: 2,
            big_l0: 8,
            theta_sc: 1,
            k_max: 1,
            radius: 24,
            theta_iso: 0.5,
            horizon_t: 1.0,
            steps: 10_000,
            heat_steps: 512,
            replicas: 200,
            budget: 2_000,
            checks: BTreeSet::new(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentSpec {
    /// Applies one key=value assignment; unknown keys are rejected
    /// (fail-closed to keep typos from silently corrupting experiments).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: std::num::ParseIntError| Error::Parse(e.to_string());
        let badf = |e: std::num::ParseFloatError| Error::Parse(e.to_string());
        match key {
            "model" => self.model = value.parse()?,
            "u" => self.u = value.parse().map_err(badf)?,
            "d" => self.dim = value.parse().map_err(bad)?,
            "n" => self.side = value.parse().map_err(bad)?,
            "wrap" => {
                self.wrap = match value {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    other => return Err(Error::Parse(format!("bad wrap value '{other}'"))),
                }
            }
            "seed" => self.seed = value.parse().map_err(bad)?,
            "eta" => {
                self.eta = if value == "estimate" {
                    None
                } else {
                    Some(value.parse().map_err(badf)?)
                }
            }
            "l0" => self.l0 = value.parse().map_err(bad)?,
            "r0" => self.r0 = value.parse().map_err(bad)?,
            "L0" => self.big_l0 = value.parse().map_err(bad)?,
            "theta_sc" => self.theta_sc = value.parse().map_err(bad)?,
            "k_max" => self.k_max = value.parse().map_err(bad)?,
            "R" => self.radius = value.parse().map_err(bad)?,
            "theta_iso" => self.theta_iso = value.parse().map_err(badf)?,
            "T" => self.horizon_t = value.parse().map_err(badf)?,
            "steps" => self.steps = value.parse().map_err(bad)?,
            "heat_steps" => self.heat_steps = value.parse().map_err(bad)?,
            "replicas" => self.replicas = value.parse().map_err(bad)?,
            "budget" => self.budget = value.parse().map_err(bad)?,
            "checks" => {
                self.checks = if value == "all" {
                    CheckKind::ALL.into_iter().collect()
                } else if value.is_empty() || value == "none" {
                    BTreeSet::new()
                } else {
                    value
                        .split(',')
                        .map(|c| c.trim().parse())
                        .collect::<Result<BTreeSet<CheckKind>>>()?
                };
            }
            "out" => self.out_dir = PathBuf::from(value),
            other => return Err(usage(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a flat key=value file ('#' starts a comment). Sweep keys are
    /// returned separately.
    pub fn from_file(path: &Path) -> Result<(ExperimentSpec, SweepPlan)> {
        let text = std::fs::read_to_string(path)?;
        let mut spec = ExperimentSpec::default();
        let mut plan = SweepPlan::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "sweep_u" => {
                    plan.us = value
                        .split(',')
                        .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                        .collect::<Result<Vec<f64>>>()?;
                }
                "sweep_seed" => {
                    plan.seeds = value
                        .split(',')
                        .map(|v| v.trim().parse::<u64>().map_err(|e| Error::Parse(e.to_string())))
                        .collect::<Result<Vec<u64>>>()?;
                }
                _ => spec.apply(key, value)?,
            }
        }
        Ok((spec, plan))
    }

    /// Canonical flat serialization (stable key order); the basis of the
    /// provenance hash.
    pub fn canonical_text(&self) -> String {
        let checks: Vec<&str> = self.checks.iter().map(|c| c.as_str()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "model = {}", self.model.as_str());
        let _ = writeln!(s, "u = {}", self.u);
        let _ = writeln!(s, "d = {}", self.dim);
        let _ = writeln!(s, "n = {}", self.side);
        let _ = writeln!(s, "wrap = {}", self.wrap as u8);
        let _ = writeln!(s, "seed = {}", self.seed);
        match self.eta {
            Some(e) => {
                let _ = writeln!(s, "eta = {e}");
            }
            None => {
                let _ = writeln!(s, "eta = estimate");
            }
        }
        let _ = writeln!(s, "l0 = {}", self.l0);
        let _ = writeln!(s, "r0 = {}", self.r0);
        let _ = writeln!(s, "L0 = {}", self.big_l0);
        let _ = writeln!(s, "theta_sc = {}", self.theta_sc);
        let _ = writeln!(s, "k_max = {}", self.k_max);
        let _ = writeln!(s, "R = {}", self.radius);
        let _ = writeln!(s, "theta_iso = {}", self.theta_iso);
        let _ = writeln!(s, "T = {}", self.horizon_t);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "heat_steps = {}", self.heat_steps);
        let _ = writeln!(s, "replicas = {}", self.replicas);
        let _ = writeln!(s, "budget = {}", self.budget);
        let _ = writeln!(s, "checks = {}", checks.join(","));
        s
    }

    pub fn provenance_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in self.canonical_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        mix64(h)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let window = Window::new(self.side, self.dim, self.wrap)?;
        Ok(ModelSpec::new(self.model, self.u, window, self.seed))
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepPlan {
    pub us: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Measured,
    Skipped,
}

impl CheckStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Measured => "measured",
            CheckStatus::Skipped => "skipped",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub check: CheckKind,
    pub status: CheckStatus,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct RunReport {
    pub outcomes: Vec<CheckOutcome>,
    pub spec_hash: u64,
    pub version: &'static str,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        self.outcomes.iter().any(|o| o.status == CheckStatus::Fail)
    }
}

/// Lazily computed shared state of one run.
struct RunContext {
    spec: ExperimentSpec,
    config: Option<sampler::Config>,
    eta: Option<f64>,
    ladder: Option<renorm::ScaleLadder>,
    levels: Option<renorm::Levels>,
    field: Option<renorm::GoodnessField>,
    h_holds: Option<bool>,
    fat: Option<renorm::FatSet>,
}

impl RunContext {
    fn config(&mut self) -> Result<&sampler::Config> {
        if self.config.is_none() {
            self.config = Some(sampler::sample(&self.spec.model_spec()?)?);
        }
        Ok(self.config.as_ref().unwrap())
    }

    fn eta(&mut self) -> Result<f64> {
        if self.eta.is_none() {
            self.eta = Some(match self.spec.eta {
                Some(e) => e,
                None => {
                    // estimated on a smaller wrapped window, seeded from the
                    // spec seed via the replica stream
                    let side = self.spec.side.min(64);
                    let window = Window::new(side, self.spec.dim, true)?;
                    let mspec = ModelSpec::new(
                        self.spec.model,
                        self.spec.u,
                        window,
                        substream(self.spec.seed, stream::REPLICA, u64::MAX),
                    );
                    sampler::estimate_eta(&mspec, self.spec.replicas.clamp(16, 200))?.value
                }
            });
        }
        Ok(self.eta.unwrap())
    }

    fn ladder(&mut self) -> Result<&renorm::ScaleLadder> {
        if self.ladder.is_none() {
            self.ladder = Some(renorm::build_scale_ladder(
                self.spec.l0,
                self.spec.r0,
                self.spec.big_l0,
                self.spec.theta_sc,
                self.spec.k_max.max(6),
            )?);
        }
        Ok(self.ladder.as_ref().unwrap())
    }

    /// Levels from the canonical rule when R clears the `L0^{3d^2/theta}`
    /// threshold; otherwise the pinned floor levels s = r = 0 (the canonical
    /// threshold is unreachable at desk scale for L0 > 1, and event H and
    /// the fat set are well-defined at any fixed level).
    fn levels(&mut self) -> Result<renorm::Levels> {
        if self.levels.is_none() {
            let (dim, radius, theta) = (self.spec.dim, self.spec.radius, self.spec.theta_iso);
            let ladder = self.ladder()?;
            self.levels = Some(match renorm::compute_levels(ladder, dim, radius, theta) {
                Ok(levels) => levels,
                Err(Error::Usage(_)) => renorm::Levels { s: 0, r: 0 },
                Err(e) => return Err(e),
            });
        }
        Ok(self.levels.unwrap())
    }

    fn field(&mut self) -> Result<&renorm::GoodnessField> {
        if self.field.is_none() {
            let eta = self.eta()?;
            let levels = self.levels()?;
            let k_needed = levels.s.max(levels.r);
            let ladder = self.ladder()?.clone();
            let cfg = self.config()?;
            self.field = Some(renorm::classify_good(cfg, &ladder, eta, k_needed, false)?);
        }
        Ok(self.field.as_ref().unwrap())
    }

    fn fat(&mut self) -> Result<&renorm::FatSet> {
        if self.fat.is_none() {
            let levels = self.levels()?;
            let radius = self.spec.radius;
            self.field()?;
            let ladder = self.ladder()?.clone();
            let field = self.field.as_ref().unwrap();
            self.fat = Some(renorm::build_fat_set(field, &ladder, levels, radius)?);
        }
        Ok(self.fat.as_ref().unwrap())
    }
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(dir.join(name))?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

fn csv(header: &str, rows: &[Vec<String>]) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Deterministic walk start: the occupied site of the largest component
/// closest to the origin (l1, ties lexicographic).
pub fn walk_start(cfg: &sampler::Config) -> Result<Point> {
    let w = cfg.window();
    let labeling = cluster::label_components(cfg);
    let best = cluster::largest_component(cfg, &labeling, &w.bounding_box())?;
    let origin = Point::origin(w.dim());
    let mut best_site: Option<(u64, Point)> = None;
    for i in 0..w.site_count() {
        if labeling.label_of_index(i) == Some(best.component) {
            let p = w.decode(i);
            let dist = crate::lattice::l1_dist(&p, &origin)?;
            if best_site.as_ref().map_or(true, |(d0, p0)| {
                dist < *d0 || (dist == *d0 && p < *p0)
            }) {
                best_site = Some((dist, p));
            }
        }
    }
    best_site
        .map(|(_, p)| p)
        .ok_or_else(|| usage("walk_start: configuration has no occupied sites"))
}

/// Executes every enabled check on one spec, writing CSVs, artifacts and
/// `report.txt` under its output directory. Module errors are isolated per
/// check (the failing stage is named in the report); only infrastructure
/// errors (I/O) abort the run.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunReport> {
    std::fs::create_dir_all(&spec.out_dir)?;
    write_file(&spec.out_dir, "spec.resolved", &spec.canonical_text())?;

    let mut ctx = RunContext {
        spec: spec.clone(),
        config: None,
        eta: None,
        ladder: None,
        levels: None,
        field: None,
        h_holds: None,
        fat: None,
    };
    let mut outcomes = Vec::new();

    for check in spec.checks.iter().copied() {
        let start = Instant::now();
        let result = run_check(check, &mut ctx);
        let seconds = start.elapsed().as_secs_f64();
        let outcome = match result {
            Ok((status, detail)) => CheckOutcome {
                check,
                status,
                detail,
                seconds,
            },
            Err(Error::Io(e)) => return Err(Error::Io(e)),
            Err(e) => CheckOutcome {
                check,
                status: CheckStatus::Fail,
                detail: format!("stage error: {e}"),
                seconds,
            },
        };
        outcomes.push(outcome);
    }

    // artifacts that exist regardless of which checks ran
    if let Some(cfg) = &ctx.config {
        let mut buf = Vec::new();
        sampler::write_config(cfg, &mut buf)?;
        std::fs::write(spec.out_dir.join("config.raster"), &buf)?;
    }
    if let Some(field) = &ctx.field {
        let mut buf = Vec::new();
        renorm::write_goodness_field(field, &mut buf)?;
        std::fs::write(spec.out_dir.join("goodness.txt"), &buf)?;
    }
    if let Some(fat) = &ctx.fat {
        let mut buf = Vec::new();
        renorm::write_fat_set(fat, &mut buf)?;
        std::fs::write(spec.out_dir.join("fatset.txt"), &buf)?;
    }

    let report = RunReport {
        outcomes,
        spec_hash: spec.provenance_hash(),
        version: env!("CARGO_PKG_VERSION"),
    };
    let mut text = String::new();
    let _ = writeln!(text, "perclab run report");
    let _ = writeln!(text, "version: {}", report.version);
    let _ = writeln!(text, "spec hash: {:016x}", report.spec_hash);
    for o in &report.outcomes {
        let _ = writeln!(
            text,
            "{:<12} {:<9} {:.3}s  {}",
            o.check.as_str(),
            o.status.as_str(),
            o.seconds,
            o.detail
        );
    }
    write_file(&spec.out_dir, "report.txt", &text)?;
    Ok(report)
}

fn run_check(check: CheckKind, ctx: &mut RunContext) -> Result<(CheckStatus, String)> {
    let spec = ctx.spec.clone();
    let dir = spec.out_dir.clone();
    match check {
        CheckKind::Eta => {
            let est = sampler::estimate_eta(&spec.model_spec()?, spec.replicas.max(1))?;
            write_file(
                &dir,
                "eta.csv",
                &csv(
                    "value,stderr,replicas",
                    &[vec![
                        est.value.to_string(),
                        est.stderr.to_string(),
                        est.replicas.to_string(),
                    ]],
                ),
            )?;
            Ok((
                CheckStatus::Measured,
                format!("eta = {} +- {}", est.value, est.stderr),
            ))
        }
        CheckKind::BadProb => {
            let eta = ctx.eta()?;
            let ladder = ctx.ladder()?.clone();
            let mspec = spec.model_spec()?;
            let mut rows = Vec::new();
            let mut detail = String::new();
            let mut monotone = true;
            let mut prev = f64::INFINITY;
            for k in 0..=spec.k_max.min(ladder.max_level()) {
                let est = renorm::estimate_bad_probability(&mspec, &ladder, eta, k, spec.replicas)?;
                rows.push(vec![
                    k.to_string(),
                    est.estimate.to_string(),
                    est.stderr.to_string(),
                    est.envelope.to_string(),
                ]);
                let _ = write!(detail, "p{k} = {} ", est.estimate);
                if est.estimate > prev {
                    monotone = false;
                }
                prev = est.estimate;
            }
            write_file(&dir, "badprob.csv", &csv("k,estimate,stderr,envelope", &rows))?;
            let _ = write!(detail, "(non-increasing: {monotone})");
            Ok((CheckStatus::Measured, detail))
        }
        CheckKind::EventH => {
            let levels = ctx.levels()?;
            let ladder = ctx.ladder()?.clone();
            ctx.field()?;
            let cfg = ctx.config.as_ref().unwrap();
            let field = ctx.field.as_ref().unwrap();
            let report = renorm::check_event_h(cfg, &ladder, levels, spec.radius, field)?;
            let rows = vec![
                vec!["a".into(), report.clause_a_failures.len().to_string()],
                vec!["b".into(), report.clause_b_failures.len().to_string()],
            ];
            write_file(&dir, "event_h.csv", &csv("clause,failures", &rows))?;
            ctx.h_holds = Some(report.holds);
            Ok((
                if report.holds {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Fail
                },
                format!(
                    "s = {}, r = {}, clause-a failures: {}, clause-b failures: {}",
                    levels.s,
                    levels.r,
                    report.clause_a_failures.len(),
                    report.clause_b_failures.len()
                ),
            ))
        }
        CheckKind::FatSet => {
            let ladder = ctx.ladder()?.clone();
            ctx.fat()?;
            let field = ctx.field.as_ref().unwrap();
            let fat = ctx.fat.as_ref().unwrap();
            let report = renorm::verify_fat_set(fat, &ladder, field, 8)?;
            // coarse slice isoperimetry constant (recorded, not asserted)
            let slice_gamma = fat
                .top
                .iter()
                .min_by_key(|t| t.0.iter().map(|c| c.abs()).max().unwrap_or(0))
                .and_then(|t| iso::coarse_slice_gamma(fat, t, spec.seed));
            let rows = vec![vec![
                fat.members.len().to_string(),
                fat.log.len().to_string(),
                report.min_density_b.to_string(),
                report.density_bound_d.to_string(),
                slice_gamma.map_or(String::from("nan"), |g| g.to_string()),
                report.ok.to_string(),
            ]];
            write_file(
                &dir,
                "fatset.csv",
                &csv(
                    "members,deletions,min_density,density_bound,slice_gamma,ok",
                    &rows,
                ),
            )?;
            Ok((
                if report.ok {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Fail
                },
                format!(
                    "members = {}, deletions = {}, min density = {:.4} (bound {:.4}), \
                     slice gamma = {slice_gamma:?}, violations = {}",
                    fat.members.len(),
                    fat.log.len(),
                    report.min_density_b,
                    report.density_bound_d,
                    report.violations.len()
                ),
            ))
        }
        CheckKind::IsoProfile => {
            let cfg = ctx.config()?;
            let report =
                iso::heuristic_profile(cfg, spec.radius, spec.theta_iso, spec.budget, spec.seed)?;
            let mut rows = Vec::new();
            for c in &report.per_method {
                rows.push(vec![
                    spec.seed.to_string(),
                    spec.model.as_str().to_string(),
                    spec.u.to_string(),
                    spec.radius.to_string(),
                    spec.theta_iso.to_string(),
                    c.method.clone(),
                    c.size.to_string(),
                    c.boundary.to_string(),
                    c.ratio.to_string(),
                ]);
            }
            write_file(
                &dir,
                "iso.csv",
                &csv("seed,model,u,R,theta_iso,method,size,boundary,ratio", &rows),
            )?;
            Ok((
                CheckStatus::Measured,
                format!(
                    "min ratio = {} over {} candidates (floor {})",
                    report.min_ratio, report.candidates, report.floor_count
                ),
            ))
        }
        CheckKind::Reduction => {
            let eta = ctx.eta()?;
            ctx.fat()?;
            let cfg = ctx.config.as_ref().unwrap();
            let fat = ctx.fat.as_ref().unwrap();
            let special = renorm::special_components(cfg, fat, eta)?;
            let h_verified = ctx.h_holds.unwrap_or(false);
            let subsets = reduction_subsets(cfg, spec.radius, spec.seed, 20)?;
            let mut rows = Vec::new();
            let mut all_ok = true;
            for (idx, a) in subsets.iter().enumerate() {
                let rep = iso::check_reduction_inequalities(cfg, fat, &special, a, h_verified)?;
                all_ok &= rep.boundary_ok && rep.volume_ok;
                rows.push(vec![
                    idx.to_string(),
                    rep.a_size.to_string(),
                    rep.boundary.to_string(),
                    rep.m_a_size.to_string(),
                    rep.d_a_size.to_string(),
                    rep.coarse_boundary.to_string(),
                    rep.boundary_ok.to_string(),
                    rep.volume_ok.to_string(),
                    rep.gamma_coarse.map_or(String::from("nan"), |g| g.to_string()),
                ]);
            }
            write_file(
                &dir,
                "reduction.csv",
                &csv(
                    "subset,size,boundary,m_a,d_a,coarse_boundary,boundary_ok,volume_ok,gamma",
                    &rows,
                ),
            )?;
            let status = if all_ok {
                if h_verified {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Measured // unconditioned: H not verified
                }
            } else {
                CheckStatus::Fail
            };
            Ok((
                status,
                format!(
                    "{} subsets, all inequalities hold: {all_ok}, conditioned on H: {h_verified}",
                    subsets.len()
                ),
            ))
        }
        CheckKind::WalkMsd => {
            let cfg = ctx.config()?;
            let x0 = walk_start(cfg)?;
            let times = log_spaced_times(spec.steps);
            let out = walk::estimate_msd(cfg, &x0, &times, spec.replicas, spec.seed)?;
            let rows: Vec<Vec<String>> = out
                .iter()
                .map(|p| vec![p.n.to_string(), p.msd.to_string(), p.stderr.to_string()])
                .collect();
            write_file(&dir, "msd.csv", &csv("n,msd,stderr", &rows))?;
            let (slope, r2) = linear_fit(&out);
            Ok((
                CheckStatus::Measured,
                format!("slope = {slope:.4}, R2 = {r2:.5}"),
            ))
        }
        CheckKind::WalkCov => {
            let cfg = ctx.config()?;
            let x0 = walk_start(cfg)?;
            let est = walk::estimate_covariance(
                cfg,
                &x0,
                spec.steps,
                spec.horizon_t,
                spec.replicas.max(2),
                spec.seed,
            )?;
            let mut rows = Vec::new();
            for i in 0..spec.dim {
                for j in 0..spec.dim {
                    rows.push(vec![
                        i.to_string(),
                        j.to_string(),
                        est.covariance[(i, j)].to_string(),
                        est.halfwidths[(i, j)].to_string(),
                    ]);
                }
            }
            write_file(&dir, "cov.csv", &csv("i,j,cov,halfwidth", &rows))?;
            Ok((
                CheckStatus::Measured,
                format!(
                    "min eigenvalue = {} +- {}",
                    est.min_eigenvalue, est.min_eigenvalue_halfwidth
                ),
            ))
        }
        CheckKind::HeatKernel => {
            let cfg = ctx.config()?;
            let x0 = walk_start(cfg)?;
            let n_max = spec.heat_steps;
            let range = (n_max / 16, n_max / 2);
            let out = walk::return_probability(cfg, &x0, n_max, range)?;
            let d = spec.dim as f64;
            let mut rows = Vec::new();
            for n in 0..=(n_max / 2) {
                let p2n = out.p[(2 * n) as usize];
                rows.push(vec![
                    n.to_string(),
                    p2n.to_string(),
                    ((n as f64).powf(d / 2.0) * p2n).to_string(),
                ]);
            }
            write_file(&dir, "heatkernel.csv", &csv("n,p2n,scaled", &rows))?;
            Ok((
                CheckStatus::Measured,
                format!(
                    "n^(d/2) p_2n in [{}, {}] over n in [{}, {}] (truncated: {})",
                    out.inf_scaled, out.sup_scaled, range.0, range.1, out.truncated
                ),
            ))
        }
        CheckKind::Corrector => {
            let cfg = ctx.config()?;
            let x0 = walk_start(cfg)?;
            let max_k = ((spec.side - 1) / 2 - 1).min(spec.radius);
            let radii = [max_k / 4, max_k / 2, max_k];
            let mut fields = Vec::new();
            for &k in &radii {
                if k < 2 {
                    return Err(usage("corrector radii too small; increase R or n"));
                }
                let sub = LatticeBox::new(
                    Point(x0.0.iter().map(|c| c - k).collect()),
                    2 * k + 1,
                )?;
                fields.push(walk::estimate_corrector(cfg, &sub, &x0, 1e-8)?);
            }
            let report = walk::check_corrector_sublinearity(&fields)?;
            let rows: Vec<Vec<String>> = report
                .m
                .iter()
                .map(|(k, m)| vec![k.to_string(), m.to_string()])
                .collect();
            write_file(&dir, "corrector.csv", &csv("k,m_k", &rows))?;
            // shift-consistency spot-check at the smallest radius (recorded)
            let k0 = radii[0];
            let sub0 = LatticeBox::new(
                Point(x0.0.iter().map(|c| c - k0).collect()),
                2 * k0 + 1,
            )?;
            let shift = Point::unit(spec.dim, 0);
            let shift_dev = walk::shift_consistency_check(cfg, &sub0, &x0, &shift, 1e-8)
                .map(|d| format!("{d:.3e}"))
                .unwrap_or_else(|e| format!("n/a ({e})"));
            Ok((
                if report.top_decreasing {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Fail
                },
                format!(
                    "m_k sequence: {:?}; shift-consistency deviation {shift_dev}",
                    report.m
                ),
            ))
        }
        CheckKind::Predicates => {
            let cfg = ctx.config()?;
            let a3 = cluster::check_a3(cfg, spec.radius)?;
            let a3_frac =
                a3.iter().filter(|&&b| b).count() as f64 / a3.len().max(1) as f64;
            let a4_c = cluster::empirical_a4_constant(cfg, spec.radius)?;
            let lu = cluster::check_local_uniqueness(cfg, spec.radius)?;
            let rows = vec![
                vec!["a3_fraction".into(), a3_frac.to_string()],
                vec![
                    "a4_constant".into(),
                    a4_c.map_or(String::from("nan"), |c| c.to_string()),
                ],
                vec!["s1_exists".into(), lu.0.to_string()],
                vec!["s1_unique".into(), lu.1.to_string()],
            ];
            write_file(&dir, "predicates.csv", &csv("predicate,value", &rows))?;
            let ok = a3_frac == 1.0 && lu.0 && lu.1;
            Ok((
                if ok { CheckStatus::Pass } else { CheckStatus::Measured },
                format!(
                    "A3 fraction = {a3_frac}, A4 constant = {a4_c:?}, S1 = {lu:?} (surrogate-based)"
                ),
            ))
        }
    }
}

/// Deterministic subsets of the largest cluster of B(0,R): chemical balls
/// around seeded centers and coordinate rectangles.
pub fn reduction_subsets(
    cfg: &sampler::Config,
    radius: i64,
    seed: u64,
    count: usize,
) -> Result<Vec<iso::SiteSet>> {
    let w = cfg.window();
    let region = linf_ball(&Point::origin(w.dim()), radius as f64)?;
    let labeling = cluster::label_components(cfg);
    let best = cluster::largest_component(cfg, &labeling, &region)?;
    let mut cr: Vec<usize> = Vec::new();
    for p in region.points() {
        if let Some(i) = w.index(&p) {
            if labeling.label_of_index(i) == Some(best.component) {
                cr.push(i);
            }
        }
    }
    cr.sort_unstable();
    let rng = CounterRng::new(seed, stream::SUBSETS);
    let mut subsets = Vec::new();
    let half = count / 2;
    // chemical balls
    for t in 0..half as u64 {
        let center = cr[rng.below_at(2 * t, cr.len() as u64) as usize];
        let t_radius = 2 + rng.below_at(2 * t + 1, (radius as u64).max(3) - 2) as u32;
        let dist = cluster::bfs_distances(cfg, &[center], None);
        let sites: Vec<usize> = cr
            .iter()
            .copied()
            .filter(|&i| dist[i] <= t_radius)
            .collect();
        if !sites.is_empty() {
            subsets.push(iso::SiteSet::from_indices(cfg, sites)?);
        }
    }
    // coordinate rectangles
    for t in 0..(count - half) as u64 {
        let base = 1000 + 2 * t;
        let lo: Vec<i64> = (0..w.dim())
            .map(|a| -radius + rng.below_at(base + a as u64 * 17, radius as u64) as i64)
            .collect();
        let hi: Vec<i64> = (0..w.dim())
            .map(|a| {
                let l = lo[a];
                l + 1 + rng.below_at(base + 100 + a as u64 * 17, (radius - l).max(2) as u64) as i64
            })
            .collect();
        let sites: Vec<usize> = cr
            .iter()
            .copied()
            .filter(|&i| {
                let p = w.decode(i);
                p.0.iter()
                    .zip(lo.iter().zip(&hi))
                    .all(|(c, (l, h))| c >= l && c <= h)
            })
            .collect();
        if !sites.is_empty() {
            subsets.push(iso::SiteSet::from_indices(cfg, sites)?);
        }
    }
    Ok(subsets)
}

fn log_spaced_times(steps: u64) -> Vec<u64> {
    let lo = (steps / 64).max(4);
    let mut times: Vec<u64> = (0..14)
        .map(|j| {
            let f = j as f64 / 13.0;
            ((lo as f64) * (steps as f64 / lo as f64).powf(f)).round() as u64
        })
        .collect();
    times.sort_unstable();
    times.dedup();
    times
}

/// Least-squares line through the MSD points; returns (slope, R^2).
pub fn linear_fit(points: &[walk::MsdPoint]) -> (f64, f64) {
    let n = points.len() as f64;
    if points.len() < 2 {
        return (0.0, 0.0);
    }
    let mx = points.iter().map(|p| p.n as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.msd).sum::<f64>() / n;
    let sxy: f64 = points
        .iter()
        .map(|p| (p.n as f64 - mx) * (p.msd - my))
        .sum();
    let sxx: f64 = points.iter().map(|p| (p.n as f64 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.msd - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return (0.0, 1.0);
    }
    let slope = sxy / sxx;
    let r2 = (sxy * sxy) / (sxx * syy);
    (slope, r2)
}

/// One run per grid point (cross product of sweep u-values and seeds),
/// parallel over points with stable output ordering; per-point failures are
/// isolated in the result list.
pub fn sweep(template: &ExperimentSpec, plan: &SweepPlan) -> Result<Vec<(String, Result<RunReport>)>> {
    let us = if plan.us.is_empty() {
        vec![template.u]
    } else {
        plan.us.clone()
    };
    let seeds = if plan.seeds.is_empty() {
        vec![template.seed]
    } else {
        plan.seeds.clone()
    };
    if us.is_empty() || seeds.is_empty() {
        return Err(usage("sweep grid is empty"));
    }
    let mut points = Vec::new();
    for &u in &us {
        for &seed in &seeds {
            let mut spec = template.clone();
            spec.u = u;
            spec.seed = seed;
            let label = format!("u{u}_seed{seed}");
            spec.out_dir = template.out_dir.join(&label);
            points.push((label, spec));
        }
    }
    Ok(points
        .into_par_iter()
        .map(|(label, spec)| (label, run_experiment(&spec)))
        .collect())
}
