use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use zmfc_cli::config::{Config, Overrides};
use zmfc_cli::{commands, write_report, Format, Report, RunManifest};

/// Particle simulator and verifier for partially observed mean-field control
/// with a hidden Markov regime.
#[derive(Parser, Debug)]
#[command(name = "zmfc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON), or a previous run's manifest.json.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    particles: Option<usize>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse and validate the config; print model dimensions.
    Validate,
    /// Filter means against regime marginals, filter mass and positivity.
    FilterCheck,
    /// Separated-problem reward against the original-problem oracle.
    EquivalenceCheck,
    /// Itô residuals for cylindrical test functions.
    ItoCheck,
    /// Snapshot and restart at split times reproduces the run exactly.
    FlowCheck,
    /// Picard iteration on the flow of the conditional law.
    Picard,
    /// Search a policy family for the largest reward.
    Optimize,
    /// Estimate the reward of the configured policy.
    Reward {
        /// Also write every recorded particle state to trajectory.csv.
        #[arg(long)]
        trajectory: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::FilterCheck => "filter-check",
            Command::EquivalenceCheck => "equivalence-check",
            Command::ItoCheck => "ito-check",
            Command::FlowCheck => "flow-check",
            Command::Picard => "picard",
            Command::Optimize => "optimize",
            Command::Reward { .. } => "reward",
        }
    }
}

fn dispatch(command: &Command, cfg: &Config) -> Result<Report> {
    match command {
        Command::Validate => commands::validate(cfg),
        Command::FilterCheck => commands::filter_check(cfg),
        Command::EquivalenceCheck => commands::equivalence_check(cfg),
        Command::ItoCheck => commands::ito_check(cfg),
        Command::FlowCheck => commands::flow_check(cfg),
        Command::Picard => commands::picard(cfg),
        Command::Optimize => commands::optimize(cfg),
        Command::Reward { trajectory } => commands::reward(cfg, *trajectory),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("building thread pool")?;
    }
    let path = c.config.as_ref().context("--config is required")?;
    let mut cfg = Config::load(path)?;
    cfg.apply(&Overrides { seed: c.seed, particles: c.particles, dt: c.dt });

    let start = Instant::now();
    let report = dispatch(&cli.command, &cfg).with_context(|| format!("{} failed", cli.command.name()))?;
    let manifest = RunManifest::new(cli.command.name(), &cfg, start.elapsed().as_secs_f64());
    write_report(&report, &manifest, &c.out, c.format)?;
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    Ok(report.pass)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
