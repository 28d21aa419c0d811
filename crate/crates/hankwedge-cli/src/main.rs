//! `hankwedge` command-line front end.
//!
//! Exit codes: 0 success, 2 invalid input, 3 file system failure, 4 solver
//! failure (singular or indeterminate system, no convergence).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hankwedge::calibration::{load_scenario, load_union, write_json, ShockScenario, Union};
use hankwedge::experiments::{
    content_hash, demand_name, hank_demand, portability_stats, run_experiment, write_report,
    Experiment, Manifest, Runner,
};
use hankwedge::household::JacobianCache;
use hankwedge::solver::{solve, Demand, Model, SolverSettings};
use hankwedge::suffstats::{PriceChange, SufficientStats};
use hankwedge::ErrorClass;

/// Experiment that reads a directory of reset-gap components instead of a
/// union calibration.
const PORTABILITY: &str = "portability-stats";

/// Quarters of the scenario summed into the price change used by
/// `suffstats` when no `--dp` is given.
const DP_QUARTERS: usize = 4;

#[derive(Debug, Parser)]
#[command(
    name = "hankwedge",
    version,
    about = "Reset-heterogeneity wedge statistics and union transition paths"
)]
struct Cli {
    /// Worker threads for independent scenario runs
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..=256))]
    threads: u16,

    /// Log more on stderr (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Log errors only
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form sufficient statistics (RWEI, average inflation, wedge, MWSI) per country
    Suffstats {
        #[command(flatten)]
        input: Input,
        /// Price change as item=value pairs, e.g. `e=0.40,d=0.02`; missing items are zero
        #[arg(long, value_parser = parse_dp)]
        dp: Option<PriceChange>,
        #[command(flatten)]
        output: Output,
    },
    /// Solve the transition path of a scenario
    Solve {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        solver: SolverArgs,
        /// Include the nonlinear catch-up term
        #[arg(long)]
        nonlinear: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Run a named experiment; writes <name>.csv, <name>.json and manifest.json
    Experiment {
        /// Experiment name; an unknown name lists the valid ones
        name: String,
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        solver: SolverArgs,
        /// Drop the catch-up term (experiments are nonlinear by default)
        #[arg(long)]
        linear: bool,
        /// Gap per point of wedge used by portability-stats
        #[arg(long, default_value_t = 5.4)]
        psi: f64,
        /// Output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Load and check a calibration and optional scenario
    Validate {
        #[command(flatten)]
        input: Input,
    },
}

#[derive(Debug, Args)]
struct Input {
    /// Calibration directory
    #[arg(long)]
    calib: PathBuf,
    /// Scenario JSON; defaults to the bundled baseline essentials shock
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Horizon in quarters
    #[arg(long = "T", value_parser = clap::value_parser!(u32).range(10..=2000))]
    t: Option<u32>,
    /// Sup-norm tolerance of the nonlinear solver, in (0, 0.1]
    #[arg(long, value_parser = parse_tol)]
    tol: Option<f64>,
    /// Consumption block
    #[arg(long, value_enum, default_value_t = DemandKind::Hank)]
    demand: DemandKind,
}

#[derive(Debug, Args)]
struct Output {
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DemandKind {
    /// Heterogeneous households
    Hank,
    /// Representative-agent Euler equation
    Euler,
}

fn parse_dp(s: &str) -> std::result::Result<PriceChange, String> {
    let mut dp = PriceChange::default();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("expected item=value, got '{part}'"))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| format!("'{}' is not a number", v.trim()))?;
        if !v.is_finite() {
            return Err(format!("'{part}' is not finite"));
        }
        match k.trim() {
            "e" | "essentials" => dp.e = v,
            "d" | "goods" => dp.d = v,
            "s" | "services" => dp.s = v,
            other => return Err(format!("unknown item '{other}' (use e, d or s)")),
        }
    }
    Ok(dp)
}

fn parse_tol(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v <= 0.1 {
        Ok(v)
    } else {
        Err(format!("tolerance {v} is outside (0, 0.1]"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(h) = cause.downcast_ref::<hankwedge::Error>() {
            return match h.class() {
                ErrorClass::Validation => 2,
                ErrorClass::Io => 3,
                ErrorClass::Solver => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if let Some(c) = cause.downcast_ref::<csv::Error>() {
            return if c.is_io_error() { 3 } else { 2 };
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    let threads = usize::from(cli.threads);
    match cli.command {
        Command::Suffstats { input, dp, output } => cmd_suffstats(&input, dp, &output),
        Command::Solve {
            input,
            solver,
            nonlinear,
            output,
        } => cmd_solve(&input, &solver, nonlinear, &output),
        Command::Experiment {
            name,
            input,
            solver,
            linear,
            psi,
            out,
        } => cmd_experiment(&name, &input, &solver, linear, psi, &out, threads),
        Command::Validate { input } => cmd_validate(&input),
    }
}

fn load(input: &Input, horizon: Option<u32>) -> Result<(Union, Option<ShockScenario>)> {
    let mut union = load_union(&input.calib)?;
    if let Some(t) = horizon {
        union.common.horizon_t = t as usize;
        union.validate_params()?;
    }
    let scenario = match &input.scenario {
        Some(p) => {
            let s = load_scenario(p, &union.common)?;
            s.validate(union.common.horizon_t)?;
            Some(s)
        }
        None => None,
    };
    Ok((union, scenario))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn demand(kind: DemandKind, union: &Union) -> Result<Demand> {
    Ok(match kind {
        DemandKind::Euler => Demand::Euler,
        DemandKind::Hank => {
            let start = Instant::now();
            let cache = JacobianCache::from_env();
            let d = hank_demand(&union.common, cache.as_ref())?;
            log::info!(
                "household Jacobians ready in {:.2}s",
                start.elapsed().as_secs_f64()
            );
            d
        }
    })
}

fn settings(args: &SolverArgs) -> SolverSettings {
    let mut s = SolverSettings::default();
    if let Some(t) = args.tol {
        s.tol = t;
    }
    s
}

#[derive(Debug, Serialize)]
struct StatsRow {
    country: String,
    e: f64,
    d: f64,
    s: f64,
    lambda_e: f64,
    rwei: f64,
    avg_pi: f64,
    omega: f64,
    mwsi: f64,
    theta_bar: f64,
    nu_services: f64,
    nu_goods: f64,
}

#[derive(Debug, Serialize)]
struct StatsJson {
    country: String,
    dp: PriceChange,
    lambda_e: f64,
    groups: Vec<String>,
    #[serde(flatten)]
    stats: SufficientStats,
}

fn cmd_suffstats(input: &Input, dp: Option<PriceChange>, output: &Output) -> Result<()> {
    let (union, scenario) = load(input, None)?;
    let dp = match (dp, scenario) {
        (Some(dp), _) => dp,
        (None, Some(s)) => {
            let sum = |p: &[f64]| p.iter().take(DP_QUARTERS).sum::<f64>();
            PriceChange {
                e: sum(&s.essentials_path),
                d: sum(&s.goods_path),
                s: sum(&s.services_path),
            }
        }
        (None, None) => bail!("suffstats needs a price change: pass --dp or --scenario"),
    };
    let lambda = union.common.lambda_e;
    let stats = union
        .countries
        .iter()
        .map(|c| Ok((c, SufficientStats::compute(c, dp, lambda)?)))
        .collect::<hankwedge::Result<Vec<_>>>()?;
    out_dir(&output.out)?;
    let path = match output.format {
        Format::Csv => {
            let path = output.out.join("suffstats.csv");
            let mut w = csv::Writer::from_path(&path)?;
            for (c, s) in &stats {
                w.serialize(StatsRow {
                    country: c.code.clone(),
                    e: dp.e,
                    d: dp.d,
                    s: dp.s,
                    lambda_e: lambda,
                    rwei: s.rwei,
                    avg_pi: s.avg_pi,
                    omega: s.omega,
                    mwsi: s.mwsi,
                    theta_bar: s.theta_bar,
                    nu_services: s.nu_services,
                    nu_goods: s.nu_goods,
                })?;
            }
            w.flush()
                .with_context(|| format!("writing {}", path.display()))?;
            path
        }
        Format::Json => {
            let path = output.out.join("suffstats.json");
            let rows: Vec<StatsJson> = stats
                .into_iter()
                .map(|(c, s)| StatsJson {
                    country: c.code.clone(),
                    dp,
                    lambda_e: lambda,
                    groups: c.groups.iter().map(|g| g.label.clone()).collect(),
                    stats: s,
                })
                .collect();
            write_json(&path, &rows)?;
            path
        }
    };
    log::info!("wrote {}", path.display());
    Ok(())
}

fn cmd_solve(input: &Input, args: &SolverArgs, nonlinear: bool, output: &Output) -> Result<()> {
    let start = Instant::now();
    let (union, scenario) = load(input, args.t)?;
    let mut scenario = scenario.unwrap_or_else(|| ShockScenario::baseline(&union.common));
    scenario.nonlinear |= nonlinear;
    let demand = demand(args.demand, &union)?;
    let settings = settings(args);
    let calibration_hash = content_hash(&union);
    let scenario_hash = content_hash(&scenario);
    let model = Model::new(union, scenario, demand)?;
    let result = solve(&model, &settings)?;
    log::info!(
        "solved in {} iterations, residual {:e}",
        result.iterations,
        result.residual
    );
    out_dir(&output.out)?;
    let file = match output.format {
        Format::Csv => {
            let p = output.out.join("transition.csv");
            result.write_csv(&p)?;
            p
        }
        Format::Json => {
            let p = output.out.join("transition.json");
            result.write_json(&p)?;
            p
        }
    };
    let manifest = Manifest {
        experiment: "solve".into(),
        version: env!("CARGO_PKG_VERSION"),
        calibration_hash,
        scenario_hash,
        demand: demand_name(&model.demand),
        horizon: model.horizon(),
        window: hankwedge::experiments::WINDOW,
        threads: 1,
        settings,
        files: file_names(&[file]),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    manifest.write(&output.out)?;
    Ok(())
}

fn file_names(paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
        .collect()
}

fn valid_names() -> String {
    Experiment::ALL
        .iter()
        .map(|e| e.name())
        .chain(std::iter::once(PORTABILITY))
        .collect::<Vec<_>>()
        .join(", ")
}

fn cmd_experiment(
    name: &str,
    input: &Input,
    args: &SolverArgs,
    linear: bool,
    psi: f64,
    out: &Path,
    threads: usize,
) -> Result<()> {
    if name == PORTABILITY {
        if !psi.is_finite() {
            bail!("--psi must be finite");
        }
        let start = Instant::now();
        let stats = portability_stats(&input.calib, psi)?;
        out_dir(out)?;
        let files = write_report(out, PORTABILITY, &stats)?;
        let manifest = Manifest {
            experiment: PORTABILITY.into(),
            version: env!("CARGO_PKG_VERSION"),
            calibration_hash: content_hash(&stats.rows),
            scenario_hash: content_hash(&psi),
            demand: "none",
            horizon: 0,
            window: 0,
            threads,
            settings: SolverSettings::tight(),
            files: file_names(&files),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        manifest.write(out)?;
        return Ok(());
    }
    let exp: Experiment = name.parse().map_err(|_| {
        anyhow!(
            "unknown experiment '{name}'; valid names: {}",
            valid_names()
        )
    })?;
    let (union, scenario) = load(input, args.t)?;
    let mut base = scenario.unwrap_or_else(|| ShockScenario::baseline(&union.common));
    base.nonlinear = !linear;
    let demand = demand(args.demand, &union)?;
    let mut runner = Runner::new(union, base, demand);
    runner.threads = threads;
    if let Some(t) = args.tol {
        runner.settings.tol = t;
    }
    out_dir(out)?;
    let m = run_experiment(&runner, exp, out)?;
    log::info!("{} finished in {:.1}s", m.experiment, m.wall_time_s);
    Ok(())
}

fn cmd_validate(input: &Input) -> Result<()> {
    let (union, scenario) = load(input, None)?;
    let groups: Vec<String> = union
        .countries
        .iter()
        .map(|c| format!("{}:{}", c.code, c.groups.len()))
        .collect();
    println!(
        "ok: {} countries ({}), horizon {}{}",
        union.countries.len(),
        groups.join(" "),
        union.common.horizon_t,
        if scenario.is_some() {
            ", scenario ok"
        } else {
            ""
        }
    );
    Ok(())
}
