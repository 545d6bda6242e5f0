//! Command line front end: loads a scenario, runs the requested study, and
//! emits machine-readable artifacts.
//!
//! Subcommands
//!   simulate     path channels + strategy channels -> channels.csv, summary.json
//!   check        certification battery -> report.json, exit code by verdict
//!   oracle       finite-state static optimum -> solution JSON
//!   convergence  replication error across a dt ladder -> convergence.csv
//!
//! Exit codes: 0 success (and every check passed), 2 usage or scenario
//! error, 3 numerical abort, 4 at least one check failed, 5 at least one
//! check inconclusive (a failure dominates an inconclusive verdict).
//!
//! All randomness flows from the scenario seed (or its --seed override);
//! reruns with the same flags produce byte-identical JSON artifacts except
//! for the manifest timestamp.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use fpmc_core::checks::{aggregate_verdict, check_martingale, run_checks, CheckConfig, Verdict};
use fpmc_core::convergence::{run_convergence, write_convergence_csv};
use fpmc_core::error::Error;
use fpmc_core::oracle::{brute_force, solve_lagrangian, FiniteMarket, GridSpec, OracleUtility};
use fpmc_core::paths::{
    simulate_market, simulate_noise, simulate_risk_aversion, write_csv, MarketOpts,
};
use fpmc_core::preferences::initial_utility;
use fpmc_core::rng::{NoiseKey, STREAM_MAIN};
use fpmc_core::scenario::{parse_scenario, UtilitySpec};
use fpmc_core::strategies::{
    consistent_optimal_exposure, consistent_optimal_wealth, estimate_constants,
    general_exp_optimal_wealth, log_optimal_wealth, merton_exponential_wealth,
    noise_optimal_wealth, noise_strategy, power_optimal_wealth,
};
use fpmc_core::{Result, Scenario};

#[derive(Parser)]
#[command(
    name = "fpmc",
    version,
    about = "Monte Carlo engine for optimal portfolio choice under state-dependent preferences"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the market and the optimal-strategy channels, dump them to
    /// CSV, and summarize the martingale batteries.
    Simulate(RunArgs),
    /// Run certification checks and write a verdict report.
    Check(CheckArgs),
    /// Solve a finite-state optimal allocation and cross-check it against
    /// the derivative-free solver.
    Oracle(OracleArgs),
    /// Measure the terminal replication error across a ladder of step sizes.
    Convergence(ConvArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario path count.
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated check names; empty means the family's default set.
    #[arg(long, value_delimiter = ',')]
    checks: Vec<String>,
}

#[derive(Args)]
struct OracleArgs {
    /// Market JSON file: {"p": [...], "q": [...]}.
    #[arg(long)]
    scenario: PathBuf,
    /// Optional output directory for oracle.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Utility family: exp, power, or state_dep.
    #[arg(long, default_value = "exp")]
    utility: String,
    /// Risk aversion; a comma-separated list (one per state) for state_dep.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    gamma: Vec<f64>,
    /// Budget (initial wealth).
    #[arg(long, default_value_t = 0.0)]
    x0: f64,
}

#[derive(Args)]
struct ConvArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated step sizes, each "N" or "1/N" steps per unit time.
    #[arg(long, value_delimiter = ',')]
    dt_ladder: Vec<String>,
    /// Strategy to integrate: "optimal" replicates the closed form, "zero"
    /// holds wealth flat so the error column does not shrink.
    #[arg(long, default_value = "optimal")]
    strategy: String,
}

/// Invocation record embedded verbatim in every artifact.
#[derive(Clone, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    scenario: String,
    out_dir: Option<String>,
    seed_override: Option<u64>,
    paths_override: Option<usize>,
    timestamp_unix: u64,
}

fn manifest(
    subcommand: &'static str,
    scenario: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    paths: Option<usize>,
) -> RunManifest {
    RunManifest {
        tool: "fpmc",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        scenario: scenario.display().to_string(),
        out_dir: out.map(|p| p.display().to_string()),
        seed_override: seed,
        paths_override: paths,
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    }
}

fn load_scenario(args: &RunArgs) -> Result<Scenario> {
    let text = fs::read_to_string(&args.scenario)?;
    let mut spec: Scenario = parse_scenario(&text)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.paths {
        if n < 2 {
            return Err(Error::domain(format!("--paths must be at least 2, got {n}")));
        }
        spec.n_paths = n;
    }
    Ok(spec)
}

fn write_pretty(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_manifest(out: &Path, man: &RunManifest) -> Result<()> {
    write_pretty(&out.join("manifest.json"), &serde_json::to_value(man)?)
}

/// Strips per-run timing so identical invocations produce byte-identical
/// artifacts; elapsed times go to stdout instead.
fn strip_wall_time(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.remove("wall_time_ms");
            for v in map.values_mut() {
                strip_wall_time(v);
            }
        }
        Value::Array(items) => {
            for v in items {
                strip_wall_time(v);
            }
        }
        _ => {}
    }
}

fn cmd_simulate(args: &RunArgs) -> Result<u8> {
    let spec = load_scenario(args)?;
    let man = manifest("simulate", &args.scenario, Some(&args.out), args.seed, args.paths);
    fs::create_dir_all(&args.out)?;

    let key = NoiseKey::new(spec.seed, STREAM_MAIN);
    let mut batch = simulate_market(&spec, spec.n_paths, key, MarketOpts { record_s: true, ..MarketOpts::default() })?;
    let consts = estimate_constants(&spec, spec.n_paths)?;

    match &spec.utility {
        UtilitySpec::StateDepExp => {
            simulate_risk_aversion(&spec, &mut batch)?;
            if spec.has_consistent_pair() {
                consistent_optimal_wealth(&spec, &mut batch)?;
                consistent_optimal_exposure(&spec, &mut batch)?;
            } else {
                let last = batch.grid().n_steps();
                general_exp_optimal_wealth(&spec, &mut batch, last, &consts)?;
            }
        }
        UtilitySpec::DetExp { gamma } => {
            merton_exponential_wealth(&spec, &mut batch, *gamma, &consts)?
        }
        UtilitySpec::Power { gamma } => power_optimal_wealth(&spec, &mut batch, *gamma, &consts)?,
        UtilitySpec::Log => log_optimal_wealth(&spec, &mut batch)?,
        UtilitySpec::MultNoise { beta_x, k, .. } => {
            simulate_noise(beta_x, &mut batch)?;
            noise_optimal_wealth(&spec, &mut batch, &consts)?;
            if let Some(k) = k.clone() {
                noise_strategy(&spec, &mut batch, &k)?;
            }
        }
    }

    let names = batch.channel_names();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut csv = fs::File::create(args.out.join("channels.csv"))?;
    write_csv(&batch, &refs, &mut csv)?;

    // Martingale batteries on a fresh batch so the estimates are not
    // entangled with the channels dumped above.
    let config = CheckConfig::default();
    let mut battery_batch = simulate_market(&spec, spec.n_paths, key, MarketOpts::default())?;
    let report = check_martingale(&spec, &mut battery_batch, &consts, &config)?;

    let mut summary = json!({
        "manifest": man,
        "scenario_id": spec.id(),
        "family": spec.utility.family_name(),
        "n_paths": spec.n_paths,
        "steps_per_unit": spec.steps_per_unit,
        "t_end": spec.t_end,
        "seed": spec.seed,
        "check_times": spec.check_times(),
        "initial_utility": initial_utility(&spec)?,
        "channels": names,
        "battery_band_sigmas": config.band_sigmas,
        "batteries": report.details,
        "battery_verdict": report.verdict,
    });
    strip_wall_time(&mut summary);
    write_pretty(&args.out.join("summary.json"), &summary)?;
    write_manifest(&args.out, &man)?;

    println!(
        "simulate: {} paths x {} steps, {} channels -> {}",
        spec.n_paths,
        spec.steps_per_unit,
        refs.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_check(args: &CheckArgs) -> Result<u8> {
    let spec = load_scenario(&args.run)?;
    let man = manifest(
        "check",
        &args.run.scenario,
        Some(&args.run.out),
        args.run.seed,
        args.run.paths,
    );
    fs::create_dir_all(&args.run.out)?;

    let names: Vec<&str> = args
        .checks
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect();
    let config = CheckConfig::default();
    let reports = run_checks(&spec, &names, &config)?;

    for r in &reports {
        println!(
            "{}: {} (statistic {:.6e}, band {:.6e}, {} ms)",
            r.name,
            verdict_word(r.verdict),
            r.statistic,
            r.band,
            r.wall_time_ms
        );
    }
    let verdict = aggregate_verdict(&reports);
    println!("overall: {}", verdict_word(verdict));

    let mut doc = json!({
        "manifest": man,
        "scenario_id": spec.id(),
        "family": spec.utility.family_name(),
        "verdict": verdict,
        "reports": reports,
    });
    strip_wall_time(&mut doc);
    write_pretty(&args.run.out.join("report.json"), &doc)?;
    write_manifest(&args.run.out, &man)?;

    Ok(match verdict {
        Verdict::Pass => 0,
        Verdict::Fail => 4,
        Verdict::Inconclusive => 5,
    })
}

fn verdict_word(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
        Verdict::Inconclusive => "inconclusive",
    }
}

/// Input document for the oracle subcommand.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketDoc {
    p: Vec<f64>,
    q: Vec<f64>,
}

fn cmd_oracle(args: &OracleArgs) -> Result<u8> {
    let text = fs::read_to_string(&args.scenario)?;
    let doc: MarketDoc = serde_json::from_str(&text)
        .map_err(|e| Error::domain(format!("market document: {e}")))?;
    let market = FiniteMarket::new(doc.p, doc.q)?;

    let utility = match args.utility.as_str() {
        "exp" => {
            if args.gamma.len() != 1 {
                return Err(Error::domain("exp takes exactly one --gamma"));
            }
            OracleUtility::Exp { gamma: args.gamma[0] }
        }
        "power" => {
            if args.gamma.len() != 1 {
                return Err(Error::domain("power takes exactly one --gamma"));
            }
            OracleUtility::Power { gamma: args.gamma[0] }
        }
        "state_dep" => OracleUtility::ExpStateDep {
            gammas: args.gamma.clone(),
        },
        other => {
            return Err(Error::domain(format!(
                "unknown utility '{other}' (expected exp, power, or state_dep)"
            )))
        }
    };

    let xi = solve_lagrangian(&market, &utility, args.x0)?;
    let brute = brute_force(&market, &utility, args.x0, &GridSpec::default())?;
    let delta = xi
        .iter()
        .zip(&brute)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let budget: f64 = market.q().iter().zip(&xi).map(|(&q, &x)| q * x).sum();

    // The multiplier from the first-order condition u'(xi_0) = lambda y_0.
    let y0 = market.density()[0];
    let lambda = match &utility {
        OracleUtility::Exp { gamma } => (-gamma * xi[0]).exp() / y0,
        OracleUtility::ExpStateDep { gammas } => (-gammas[0] * xi[0]).exp() / y0,
        OracleUtility::Power { gamma } => xi[0].powf(gamma - 1.0) / y0,
    };

    let man = manifest("oracle", &args.scenario, args.out.as_deref(), None, None);
    let solution = json!({
        "manifest": man,
        "utility": args.utility,
        "gamma": args.gamma,
        "x0": args.x0,
        "xi": xi,
        "lambda": lambda,
        "budget_residual": budget - args.x0,
        "brute_force_delta": delta,
    });
    println!("{}", serde_json::to_string_pretty(&solution)?);
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_pretty(&out.join("oracle.json"), &solution)?;
        write_manifest(out, &man)?;
    }
    Ok(0)
}

/// Parses one ladder entry: "N" or "1/N" steps per unit time.
fn parse_ladder_entry(entry: &str) -> Result<u32> {
    let s = entry.trim();
    let body = s.strip_prefix("1/").unwrap_or(s);
    let n: u32 = body
        .parse()
        .map_err(|_| Error::domain(format!("dt ladder entry '{s}' is not N or 1/N")))?;
    if n == 0 {
        return Err(Error::domain("dt ladder entries must be positive"));
    }
    Ok(n)
}

fn cmd_convergence(args: &ConvArgs) -> Result<u8> {
    let spec = load_scenario(&args.run)?;
    let man = manifest(
        "convergence",
        &args.run.scenario,
        Some(&args.run.out),
        args.run.seed,
        args.run.paths,
    );

    let mut ladder = Vec::with_capacity(args.dt_ladder.len());
    for entry in &args.dt_ladder {
        ladder.push(parse_ladder_entry(entry)?);
    }
    if ladder.len() < 2 {
        return Err(Error::domain(
            "--dt-ladder needs at least two step sizes (e.g. 1/128,1/256)",
        ));
    }
    let zero_exposure = match args.strategy.as_str() {
        "optimal" => false,
        "zero" => true,
        other => {
            return Err(Error::domain(format!(
                "unknown strategy '{other}' (expected optimal or zero)"
            )))
        }
    };

    let report = run_convergence(&spec, &ladder, zero_exposure)?;
    fs::create_dir_all(&args.run.out)?;
    let mut csv = fs::File::create(args.run.out.join("convergence.csv"))?;
    write_convergence_csv(&report, &mut csv)?;
    write_manifest(&args.run.out, &man)?;

    let doc = json!({ "manifest": man, "report": report });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(0)
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. }
        | Error::StateInsufficient(_)
        | Error::RankDeficient(_)
        | Error::Estimator(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Check(args) => cmd_check(args),
        Cmd::Oracle(args) => cmd_oracle(args),
        Cmd::Convergence(args) => cmd_convergence(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_for(&err))
        }
    }
}
