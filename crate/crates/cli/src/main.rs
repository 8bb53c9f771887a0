use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use fedbpt::harness::accounting::{comm_accounting, default_baselines, Baseline};
use fedbpt::harness::metrics::{accuracy_series, accuracy_svg, FinalZ};
use fedbpt::harness::{prepare, run_with, write_artifacts, ExperimentConfig, OracleKind};
use fedbpt::server::{AggregatorKind, ServerStep};
use fedbpt::subspace::generate_projection;

#[derive(Parser)]
#[command(name = "fedbpt", version, about = "Federated black-box prompt tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run(RunArgs),
    /// Print per-round communication cost and baseline ratios.
    Account(AccountArgs),
    /// Evaluate a saved final_z.json on the test set of a configuration.
    Eval(EvalArgs),
    /// Render an accuracy-vs-round SVG from a metrics.csv.
    Plot(PlotArgs),
}

/// Parses enum values with the same snake_case names the config file uses.
fn config_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "r-p")]
    r_p: Option<f64>,
    /// fed_bpt or fed_avg_bbt
    #[arg(long, value_parser = config_value::<AggregatorKind>)]
    aggregator: Option<AggregatorKind>,
    /// synthetic or remote
    #[arg(long, value_parser = config_value::<OracleKind>)]
    oracle: Option<OracleKind>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// corrected, corrected_rescaled or uncorrected
    #[arg(long, value_parser = config_value::<ServerStep>)]
    server_step: Option<ServerStep>,
    /// Shorthand for `--server-step uncorrected`.
    #[arg(long, conflicts_with = "server_step")]
    uncorrected_sigma: bool,
}

#[derive(Args)]
struct AccountArgs {
    /// JSON configuration supplying d, I and the aggregator.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sub_dim: Option<usize>,
    #[arg(long)]
    local_iterations: Option<usize>,
    #[arg(long, value_parser = config_value::<AggregatorKind>)]
    aggregator: Option<AggregatorKind>,
    /// Extra baseline as NAME=PARAMS; repeatable. Replaces the defaults.
    #[arg(long = "baseline", value_parser = parse_baseline)]
    baselines: Vec<Baseline>,
}

fn parse_baseline(s: &str) -> Result<Baseline, String> {
    let (name, params) = s.split_once('=').ok_or("expected NAME=PARAMS")?;
    let params = params.replace('_', "").parse().map_err(|e| format!("bad parameter count: {e}"))?;
    Ok(Baseline::new(name, params))
}

#[derive(Args)]
struct EvalArgs {
    /// final_z.json written by `run`.
    #[arg(long)]
    z: PathBuf,
    /// Configuration of the run (its config.json).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured remote endpoint.
    #[arg(long)]
    endpoint: Option<String>,
    /// Include per-sample losses in the report.
    #[arg(long)]
    per_sample: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// metrics.csv written by `run`.
    #[arg(long)]
    csv: PathBuf,
    /// Defaults to accuracy.svg next to the CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "Test accuracy")]
    title: String,
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    if let Some(v) = args.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.r_p {
        cfg.r_p = v;
    }
    if let Some(v) = args.aggregator {
        cfg.aggregator = v;
    }
    if let Some(v) = args.oracle {
        cfg.oracle = v;
    }
    if let Some(v) = args.endpoint {
        cfg.endpoint = Some(v);
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.out {
        cfg.out = v;
    }
    if let Some(v) = args.server_step {
        cfg.server_step = v;
    }
    if args.uncorrected_sigma {
        cfg.server_step = ServerStep::Uncorrected;
    }

    let setup = prepare(&cfg)?;
    let outcome = run_with(&cfg, &setup)?;
    write_artifacts(&outcome, &cfg, &cfg.out)?;
    let accuracy = outcome.final_accuracy().map_or("n/a".into(), |a| format!("{a:.4}"));
    match setup.floor {
        Some(floor) => println!("final accuracy {accuracy} (zero-prompt floor {floor:.4})"),
        None => println!("final accuracy {accuracy}"),
    }
    println!("artifacts written to {}", cfg.out.display());
    Ok(())
}

fn account(args: AccountArgs) -> Result<()> {
    let cfg = load_config(args.config.as_ref())?;
    let d = args.sub_dim.unwrap_or(cfg.sub_dim) as u64;
    let iterations = args.local_iterations.unwrap_or(cfg.local_iterations) as u64;
    let aggregator = args.aggregator.unwrap_or(cfg.aggregator);
    let baselines = if args.baselines.is_empty() { default_baselines() } else { args.baselines };
    let report = comm_accounting(aggregator, d, iterations, &baselines);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::from_json_file(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    if let Some(e) = args.endpoint {
        cfg.endpoint = Some(e);
    }
    let saved = FinalZ::load(&args.z).with_context(|| format!("reading {}", args.z.display()))?;
    let setup = prepare(&cfg)?;
    if setup.projection.spec() != Some(&saved.projection) {
        bail!("{} was produced with a different projection than this configuration", args.z.display());
    }
    let projection = generate_projection(&saved.projection)?;
    let prompt = projection.project(&saved.z)?;
    let mut report = setup.oracle.evaluate(&prompt, &setup.test)?;
    if !args.per_sample {
        report.per_sample_loss = None;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let csv = std::fs::read_to_string(&args.csv).with_context(|| format!("reading {}", args.csv.display()))?;
    let points = accuracy_series(&csv)?;
    let out = args.out.unwrap_or_else(|| args.csv.with_file_name("accuracy.svg"));
    std::fs::write(&out, accuracy_svg(&points, &args.title)).with_context(|| format!("writing {}", out.display()))?;
    println!("{} points plotted to {}", points.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Account(a) => account(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
