//! Command-line driver: simulate a synthetic market, infer the composition
//! of an agent population from a series, and report residual diagnostics.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use agentmix::bias::BiasMode;
use agentmix::diagnostics::build_report;
use agentmix::ensemble::{orchestrate, RunConfig};
use agentmix::io;
use agentmix::mg::TieBreak;

#[derive(Parser)]
#[command(
    name = "agentmix",
    about = "Infer the composition of a trader population from a price series",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic price series with a planted agent composition.
    Simulate(SimulateArgs),
    /// Run the constrained ensemble filter over a price series.
    Infer(InferArgs),
    /// Compute residual diagnostics for a finished inference.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Ground-truth specification (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output series CSV.
    #[arg(long)]
    out: PathBuf,
    /// Output truth log (JSON lines).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Run configuration (JSON); flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input series CSV.
    #[arg(long)]
    series: PathBuf,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of Monte Carlo runs M.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    runs: Option<u64>,
    /// Agent types per run.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    subset_size: Option<u64>,
    /// Agent memory m.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    memory: Option<u8>,
    /// Strategy-scoring horizon T.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    horizon: Option<u64>,
    /// Noise-estimation window W.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    window: Option<u64>,
    /// Bias model.
    #[arg(long, value_parser = ["none", "measurement"])]
    bias: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Break strategy-score ties with a seeded coin flip.
    #[arg(long)]
    random_ties: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory produced by `infer`.
    #[arg(long)]
    rundir: PathBuf,
    /// Output report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Summary JSON path (defaults to the report path with .json).
    #[arg(long)]
    summary_out: Option<PathBuf>,
    /// Sigma levels for the coverage table.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0])]
    levels: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Infer(args) => infer(args),
        Command::Report(args) => report(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<ExitCode> {
    let spec = io::load_synth_spec(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let (series, truth) = agentmix::synth::generate_synthetic(&spec)?;
    if truth.sigma_used != spec.noise_sigma {
        eprintln!(
            "warning: noise sigma reduced from {} to {} to keep the price positive",
            spec.noise_sigma, truth.sigma_used
        );
    }
    io::save_series_csv(&args.out, &series)?;
    if let Some(truth_path) = &args.truth {
        io::write_truth_jsonl(truth_path, &truth)?;
    }
    println!("wrote {} rates to {}", series.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn infer(args: InferArgs) -> Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(path) => {
            io::load_run_config(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = args.runs {
        cfg.runs = v as usize;
    }
    if let Some(v) = args.subset_size {
        cfg.subset_size = v as usize;
    }
    if let Some(v) = args.memory {
        cfg.memory = v;
    }
    if let Some(v) = args.horizon {
        cfg.horizon = v as usize;
    }
    if let Some(v) = args.window {
        cfg.noise.window = v as usize;
    }
    if let Some(v) = &args.bias {
        cfg.bias = match v.as_str() {
            "none" => BiasMode::None,
            "measurement" => BiasMode::Measurement { noise: 0.0 },
            other => bail!("unknown bias mode {other}"),
        };
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.random_ties {
        cfg.tie_break = TieBreak::Random;
    }
    cfg.validate()?;

    let series = io::load_series_csv(&args.series)
        .with_context(|| format!("loading {}", args.series.display()))?;
    let (summary, records) = orchestrate(&series, &cfg)?;
    io::write_run_dir(&args.out, &series, &summary, &records, &cfg)?;
    println!(
        "{} runs ({} flagged), {} timesteps -> {}",
        summary.runs_used + summary.runs_flagged,
        summary.runs_flagged,
        summary.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let (series, summary, meta) = io::read_run_dir(&args.rundir)
        .with_context(|| format!("reading {}", args.rundir.display()))?;
    let report = build_report(&series, &summary, &args.levels)?;

    io::write_report_csv(&args.out, &report)?;
    let summary_path = args
        .summary_out
        .unwrap_or_else(|| args.out.with_extension("json"));
    io::write_report_json(&summary_path, &report)?;

    println!("steps: {} ({} flagged)", report.steps.len(), report.flagged_steps);
    println!(
        "mean residual: {:+.3e} (sem {:.3e})",
        report.coverage.mean_residual, report.coverage.residual_sem
    );
    println!("directional accuracy: {:.1}%", 100.0 * report.directional_accuracy);
    println!("coverage (fraction outside k-sigma vs Chebyshev bound):");
    for row in &report.coverage.rows {
        println!(
            "  {:>4}-sigma: {:.4} <= {:.4}  [{}]",
            row.kappa,
            row.fraction_outside,
            row.bound,
            if row.pass { "pass" } else { "FAIL" }
        );
    }
    if !meta.flags.is_empty() {
        println!("flagged runs:");
        for f in &meta.flags {
            println!("  {f}");
        }
    }

    let ok = meta.flags.is_empty() && report.coverage.all_pass();
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
