use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rbx_core::harness::{self, Algorithm, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rbx", version, about = "Rollback exploration experiments on PersiaLite levels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, run.json and the graph dump.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_algo)]
        algo: Option<Algorithm>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<algo>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_merge: bool,
        #[arg(long)]
        no_prefix_negatives: bool,
        #[arg(long)]
        theta_merge: Option<f64>,
        /// Any other config key, as KEY=VALUE. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Render coverage.pgm for a finished run.
    Map {
        #[arg(long)]
        run: PathBuf,
        /// Pixels per tile edge.
        #[arg(long, default_value_t = 8)]
        block: usize,
    },
    /// Aggregate coverage curves of several runs into a CSV table.
    Summarize {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = harness::SUMMARY_FILE)]
        out: PathBuf,
    },
}

fn parse_algo(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: harness::HarnessError| e.to_string())
}

fn overrides(
    algo: Option<Algorithm>,
    seed: Option<u64>,
    no_merge: bool,
    no_prefix_negatives: bool,
    theta_merge: Option<f64>,
    set: &[String],
) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for item in set {
        let (k, v) = item
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(a) = algo {
        pairs.push(("algo".into(), a.to_string()));
    }
    if let Some(s) = seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if no_merge {
        pairs.push(("no_merge".into(), "true".into()));
    }
    if no_prefix_negatives {
        pairs.push(("no_prefix_negatives".into(), "true".into()));
    }
    if let Some(t) = theta_merge {
        pairs.push(("theta_merge".into(), t.to_string()));
    }
    Ok(pairs)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            algo,
            seed,
            out,
            no_merge,
            no_prefix_negatives,
            theta_merge,
            set,
        } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            let parsed = ExperimentConfig::parse(&text)
                .with_context(|| format!("in config {}", config.display()))?;
            let pairs = overrides(algo, seed, no_merge, no_prefix_negatives, theta_merge, &set)?;
            let exp = parsed.with_overrides(&pairs)?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("{}-seed{}", exp.algo, exp.rb.seed))
            });
            let base = config.parent().unwrap_or(Path::new("."));
            let record = harness::run_experiment(&exp, base, &out)?;
            println!(
                "{} seed {} on {}: {:.2}% coverage after {} env steps, {} iterations -> {}",
                record.algo,
                record.seed,
                record.level_name,
                record.final_coverage,
                record.env_steps,
                record.iterations,
                out.display()
            );
        }
        Command::Map { run, block } => {
            anyhow::ensure!(block > 0, "--block must be positive");
            let path = harness::write_coverage_map(&run, block)?;
            println!("{}", path.display());
        }
        Command::Summarize { runs, out } => {
            let rows = harness::summarize_dirs(&runs, &out)?;
            if let Some(last) = rows.last() {
                println!(
                    "{} runs, final coverage mean {:.2}% (min {:.2}, max {:.2}) -> {}",
                    last.runs,
                    last.mean,
                    last.min,
                    last.max,
                    out.display()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
