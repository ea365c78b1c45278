//! Command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use upllrs::cli::{
    cmd_audit, cmd_report, cmd_run_all, cmd_separate, cmd_synth, cmd_train, parse_grid_axis,
    GridAxis,
};
use upllrs::config::RunConfig;
use upllrs::error::{Error, Result};

#[derive(Parser)]
#[command(name = "upllrs", version, about = "Unreliable partial label learning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset, splits, candidate records, and audit.
    Synth(CommonArgs),
    /// Run recursive separation on a synthesized run directory.
    Separate(CommonArgs),
    /// Train in the configured mode on a prepared run directory.
    Train(CommonArgs),
    /// Synth, separate, train, and report in one invocation.
    RunAll(RunAllArgs),
    /// Recompute and print the corruption audit from stored records.
    Audit(CommonArgs),
    /// Export plot-ready tables from the run artifacts.
    Report(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory for this run.
    #[arg(long)]
    out: PathBuf,

    #[arg(long)]
    seed: Option<u64>,

    /// Training mode: general, augmented, baseline_cce, baseline_mae.
    #[arg(long)]
    mode: Option<String>,

    /// Unreliable rate.
    #[arg(long)]
    mu: Option<f64>,

    /// Partial rate.
    #[arg(long)]
    eta: Option<f64>,

    /// Separation rate per step.
    #[arg(long)]
    gamma: Option<f64>,

    /// Epochs per separation step.
    #[arg(long)]
    beta: Option<usize>,

    /// Separation patience.
    #[arg(long)]
    patience: Option<usize>,

    /// Pseudo-label confidence threshold.
    #[arg(long)]
    tau: Option<f64>,

    /// Weight of the unreliable-subset loss term.
    #[arg(long)]
    xi: Option<f64>,

    /// Train directly on the corrupted set, skipping separation.
    #[arg(long)]
    no_rs: bool,

    /// Ignore the unreliable subset in the second stage.
    #[arg(long)]
    no_unreliable: bool,

    /// Extra overrides as KEY=VALUE (any config key), repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunAllArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Sweep axis KEY=V1,V2,... (repeatable; axes combine as a product).
    #[arg(long)]
    grid: Vec<String>,
}

fn build_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &args.config {
        config.apply_file(path)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(mode) = &args.mode {
        config.apply("train.mode", mode)?;
    }
    if let Some(mu) = args.mu {
        config.apply("data.mu", &mu.to_string())?;
    }
    if let Some(eta) = args.eta {
        config.apply("data.eta", &eta.to_string())?;
    }
    if let Some(gamma) = args.gamma {
        config.apply("rs.gamma", &gamma.to_string())?;
    }
    if let Some(beta) = args.beta {
        config.apply("rs.beta", &beta.to_string())?;
    }
    if let Some(patience) = args.patience {
        config.apply("rs.patience", &patience.to_string())?;
    }
    if let Some(tau) = args.tau {
        config.apply("train.tau", &tau.to_string())?;
    }
    if let Some(xi) = args.xi {
        config.apply("train.xi", &xi.to_string())?;
    }
    if args.no_rs {
        config.use_rs = false;
    }
    if args.no_unreliable {
        config.use_unreliable = false;
    }
    for assignment in &args.set {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set {assignment:?} needs KEY=VALUE"))
        })?;
        config.apply(key.trim(), value.trim())?;
    }
    Ok(config)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(args) => cmd_synth(&build_config(args)?, &args.out),
        Command::Separate(args) => cmd_separate(&build_config(args)?, &args.out),
        Command::Train(args) => cmd_train(&build_config(args)?, &args.out),
        Command::Audit(args) => {
            let text = cmd_audit(&args.out)?;
            print!("{text}");
            Ok(())
        }
        Command::Report(args) => cmd_report(&build_config(args)?, &args.out),
        Command::RunAll(args) => {
            let config = build_config(&args.common)?;
            let grid: Result<Vec<GridAxis>> =
                args.grid.iter().map(|g| parse_grid_axis(g)).collect();
            cmd_run_all(&config, &args.common.out, &grid?)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
