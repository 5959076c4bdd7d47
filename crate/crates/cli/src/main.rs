use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mmf_online::config::parse_config;
use mmf_online::error::Error;
use mmf_online::experiment::{bench_tree, report, run_experiment, BENCH_CHECKPOINTS};
use mmf_online::mechanism::MechanismKind;

/// Simulate online demand learning inside a max-min fair allocator.
#[derive(Debug, Parser)]
#[command(name = "mmf-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (method, run) cell of a config and write CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<u64>,
        /// A method name, a comma-separated list, or "all".
        #[arg(long)]
        method: Option<String>,
    },
    /// Aggregate the summary CSVs of a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time tree recommendations as recorded points grow.
    BenchTree {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        reps: u32,
    },
}

fn parse_methods(s: &str) -> Result<Vec<MechanismKind>, Error> {
    if s == "all" {
        return Ok(MechanismKind::ALL.to_vec());
    }
    s.split(',').map(|m| m.trim().parse()).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            runs,
            method,
        } => {
            let methods = method.as_deref().map(parse_methods).transpose()?;
            let cfg = parse_config(&config)?.with_overrides(seed, runs, methods)?;
            let results = run_experiment(&cfg, &out)
                .with_context(|| format!("running {}", config.display()))?;
            for r in results.iter().filter(|r| r.run + 1 == cfg.runs) {
                println!("{:<12} cum_loss(T) = {:.6}", r.kind.name(), r.series.total_loss());
            }
            println!("wrote {} cells to {}", results.len(), out.display());
        }
        Command::Report { input, out } => {
            let rows = report(&input, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::BenchTree { config, reps } => {
            let cfg = parse_config(&config)?;
            let points = bench_tree(&cfg, &BENCH_CHECKPOINTS, reps)?;
            println!("points,mean_secs");
            for p in &points {
                println!("{},{:.9}", p.points, p.mean_secs);
            }
            if let [.., a, b] = points.as_slice() {
                println!("ratio {}/{} = {:.2}", b.points, a.points, b.mean_secs / a.mean_secs);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation));
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
