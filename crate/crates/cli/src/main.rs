use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

mod commands;
mod config;

use config::{ConfigError, Overrides, PipelineConfig};

/// Controller synthesis and robustness analysis for spin-network state transfer
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize bias-field controllers and write one set file per problem and scheme
    Synth(CommonArgs),
    /// Simulate dephasing ensembles for every controller (resumable)
    Evaluate(CommonArgs),
    /// Run the hypothesis suites and emit plot-ready CSVs
    Analyze(CommonArgs),
    /// Print the suite tables and derivative-check summary
    Report(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML run description; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated problems, e.g. `ring:6:4,chain:5:3:B`
    #[arg(long)]
    problems: Option<String>,
    #[arg(long)]
    delta_max: Option<f64>,
    #[arg(long)]
    delta_steps: Option<usize>,
    /// Skip the per-controller error-grid binaries
    #[arg(long)]
    no_grids: bool,
}

impl CommonArgs {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        let over = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            jobs: self.jobs,
            problems: self.problems.clone(),
            delta_max: self.delta_max,
            delta_steps: self.delta_steps,
            no_grids: self.no_grids,
        };
        PipelineConfig::load(self.config.as_deref(), &over)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (Command::Synth(args) | Command::Evaluate(args) | Command::Analyze(args) | Command::Report(args)) =
        &cli.command;
    let cfg = args.load()?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::Analyze(_) => commands::analyze_cmd(&cfg),
        Command::Report(_) => {
            print!("{}", commands::report(&cfg)?);
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<spinrim::error::Error>() {
            if e.is_numerical() {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
