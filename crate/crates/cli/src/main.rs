use std::path::PathBuf;
use std::process;

use clap::Parser;

use nsmc_cli::config::{parse_config, RunConfig, Subcommand};
use nsmc_cli::CliError;

/// Monte Carlo solver for the incompressible flow equations: stochastic
/// flows, walk-based pressure, and fixed-point velocity iteration.
#[derive(Parser)]
#[command(name = "nsmc", version, about)]
struct Args {
    /// What to run
    #[arg(value_enum)]
    subcommand: Cmd,
    /// Key-value config file; omit to use built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the RNG seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: NSMC_THREADS env var, else logical cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for CSV tables and the manifest
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Cmd {
    /// Fixed-point velocity solve with per-iteration diagnostics
    Solve,
    /// Walk-based screened-potential solve for pressure and its gradient
    Poisson,
    /// Backward-flow solve of a drift-diffusion terminal value problem
    Parabolic,
    /// Norm-envelope ODEs and the guaranteed existence horizon
    Apriori,
    /// Desk-scale oracle checks over every solver component
    Validate,
    /// Calibrate std-err coefficients for the tolerance guard
    Bench,
}

impl From<Cmd> for Subcommand {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Solve => Subcommand::Solve,
            Cmd::Poisson => Subcommand::Poisson,
            Cmd::Parabolic => Subcommand::Parabolic,
            Cmd::Apriori => Subcommand::Apriori,
            Cmd::Validate => Subcommand::Validate,
            Cmd::Bench => Subcommand::Bench,
        }
    }
}

fn build(args: &Args) -> Result<RunConfig, CliError> {
    let sub = Subcommand::from(args.subcommand);
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Io(std::io::Error::new(
                    e.kind(),
                    format!("{}: {e}", path.display()),
                ))
            })?;
            parse_config(&text, sub)?
        }
        None => RunConfig::defaults(sub),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() {
    let args = Args::parse();

    let threads = args
        .threads
        .or_else(|| {
            std::env::var("NSMC_THREADS")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or_else(num_cpus);
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
    {
        eprintln!("error: worker pool: {e}");
        process::exit(1);
    }

    let code = match build(&args).and_then(|cfg| nsmc_cli::runs::execute(&cfg, &args.out)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    process::exit(code);
}

fn num_cpus() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}
