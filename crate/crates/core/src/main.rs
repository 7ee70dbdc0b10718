//! Command-line interface: sample configurations, classify boxes, run the
//! renormalization / isoperimetry / walk pipelines, and sweep parameter
//! grids.
//!
//! Exit codes: 0 success, 2 an enabled check failed, 3 usage error,
//! 4 internal contract violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use perclab::error::Error;
use perclab::harness::{run_experiment, sweep, CheckKind, ExperimentSpec, RunReport, SweepPlan};
use perclab::renorm;
use perclab::sampler;

#[derive(Parser)]
#[command(name = "perclab", version, about = "correlated-percolation renormalization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct SpecArgs {
    /// Flat key=value configuration file (unknown keys are rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    u: Option<String>,
    /// Occupation density eta, or "estimate".
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    wrap: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "L0")]
    big_l0: Option<String>,
    #[arg(long)]
    l0: Option<String>,
    #[arg(long)]
    r0: Option<String>,
    #[arg(long = "theta-sc")]
    theta_sc: Option<String>,
    #[arg(long = "R")]
    radius: Option<String>,
    #[arg(long = "theta-iso")]
    theta_iso: Option<String>,
    #[arg(long = "k-max")]
    k_max: Option<String>,
    #[arg(long = "T")]
    horizon_t: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long = "heat-steps")]
    heat_steps: Option<String>,
    #[arg(long)]
    replicas: Option<String>,
    #[arg(long)]
    budget: Option<String>,
    /// Comma list of checks, "all", or "none".
    #[arg(long)]
    checks: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SpecArgs {
    fn build(&self) -> Result<(ExperimentSpec, SweepPlan), Error> {
        let (mut spec, plan) = match &self.config {
            Some(path) => ExperimentSpec::from_file(path)?,
            None => (ExperimentSpec::default(), SweepPlan::default()),
        };
        let overrides: [(&str, &Option<String>); 19] = [
            ("model", &self.model),
            ("u", &self.u),
            ("eta", &self.eta),
            ("d", &self.d),
            ("n", &self.n),
            ("wrap", &self.wrap),
            ("seed", &self.seed),
            ("L0", &self.big_l0),
            ("l0", &self.l0),
            ("r0", &self.r0),
            ("theta_sc", &self.theta_sc),
            ("R", &self.radius),
            ("theta_iso", &self.theta_iso),
            ("k_max", &self.k_max),
            ("T", &self.horizon_t),
            ("steps", &self.steps),
            ("heat_steps", &self.heat_steps),
            ("replicas", &self.replicas),
            ("budget", &self.budget),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                spec.apply(key, v)?;
            }
        }
        if let Some(checks) = &self.checks {
            spec.apply("checks", checks)?;
        }
        if let Some(out) = &self.out {
            spec.out_dir = out.clone();
        }
        Ok((spec, plan))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample one configuration and write its raster.
    Sample(SpecArgs),
    /// Sample and classify boxes up to k_max; writes the goodness field.
    Classify(SpecArgs),
    /// Renormalization pipeline: bad-box probabilities, event H, fat set.
    Renorm(SpecArgs),
    /// Isoperimetric profile of the largest cluster.
    Iso(SpecArgs),
    /// Walk diagnostics: MSD, covariance, heat kernel, corrector.
    Walk(SpecArgs),
    /// Run all enabled checks of the spec.
    Run(SpecArgs),
    /// One run per point of the (sweep_u x sweep_seed) grid.
    Sweep(SpecArgs),
}

fn print_report(label: &str, report: &RunReport) {
    for o in &report.outcomes {
        println!(
            "{label}{:<12} {:<9} {}",
            o.check.as_str(),
            o.status.as_str(),
            o.detail
        );
    }
}

fn with_checks(mut spec: ExperimentSpec, checks: &[CheckKind]) -> ExperimentSpec {
    spec.checks = checks.iter().copied().collect();
    spec
}

fn execute(command: Command) -> Result<u8, Error> {
    match command {
        Command::Sample(args) => {
            let (spec, _) = args.build()?;
            let cfg = sampler::sample(&spec.model_spec()?)?;
            std::fs::create_dir_all(&spec.out_dir)?;
            let mut buf = Vec::new();
            sampler::write_config(&cfg, &mut buf)?;
            let path = spec.out_dir.join("config.raster");
            std::fs::write(&path, &buf)?;
            println!(
                "sampled {} sites, occupied fraction {:.6} -> {}",
                cfg.window().site_count(),
                cfg.occupied_fraction(),
                path.display()
            );
            Ok(0)
        }
        Command::Classify(args) => {
            let (spec, _) = args.build()?;
            let cfg = sampler::sample(&spec.model_spec()?)?;
            let ladder = renorm::build_scale_ladder(
                spec.l0,
                spec.r0,
                spec.big_l0,
                spec.theta_sc,
                spec.k_max,
            )?;
            let eta = spec.eta.unwrap_or(spec.u);
            let field = renorm::classify_good(&cfg, &ladder, eta, spec.k_max, false)?;
            std::fs::create_dir_all(&spec.out_dir)?;
            let mut buf = Vec::new();
            renorm::write_goodness_field(&field, &mut buf)?;
            let path = spec.out_dir.join("goodness.txt");
            std::fs::write(&path, &buf)?;
            for k in 0..=field.k_max() {
                let flags = field.flags(k);
                println!(
                    "level {k}: {} A-bad, {} B-bad boxes",
                    flags.a_bad.len(),
                    flags.b_bad.len()
                );
            }
            println!("-> {}", path.display());
            Ok(0)
        }
        Command::Renorm(args) => {
            let (spec, _) = args.build()?;
            let spec = with_checks(
                spec,
                &[CheckKind::BadProb, CheckKind::EventH, CheckKind::FatSet],
            );
            let report = run_experiment(&spec)?;
            print_report("", &report);
            Ok(if report.failed() { 2 } else { 0 })
        }
        Command::Iso(args) => {
            let (spec, _) = args.build()?;
            let spec = with_checks(spec, &[CheckKind::IsoProfile]);
            let report = run_experiment(&spec)?;
            print_report("", &report);
            Ok(if report.failed() { 2 } else { 0 })
        }
        Command::Walk(args) => {
            let (spec, _) = args.build()?;
            let spec = with_checks(
                spec,
                &[
                    CheckKind::WalkMsd,
                    CheckKind::WalkCov,
                    CheckKind::HeatKernel,
                    CheckKind::Corrector,
                ],
            );
            let report = run_experiment(&spec)?;
            print_report("", &report);
            Ok(if report.failed() { 2 } else { 0 })
        }
        Command::Run(args) => {
            let (spec, _) = args.build()?;
            let report = run_experiment(&spec)?;
            print_report("", &report);
            Ok(if report.failed() { 2 } else { 0 })
        }
        Command::Sweep(args) => {
            let (spec, plan) = args.build()?;
            let results = sweep(&spec, &plan)?;
            let mut failed = false;
            for (label, result) in &results {
                match result {
                    Ok(report) => {
                        print_report(&format!("[{label}] "), report);
                        failed |= report.failed();
                    }
                    Err(e) => {
                        println!("[{label}] error: {e}");
                        failed = true;
                    }
                }
            }
            Ok(if failed { 2 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
