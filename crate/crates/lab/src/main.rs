use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use pclab::checks::{metric_output, run_check, run_suite, CHECK_COUNT};
use pclab::figures::{figure, FIGURES};
use pclab::fit::fit_power_law;
use pclab::record::{read_jsonl, RecordSink};
use pclab::runner::{run_grid, worker_count, WORKERS_ENV};
use pclab::ExperimentConfig;

#[derive(Parser)]
#[command(name = "pclab", version, about = "Predictive-coding scaling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the acceptance suite; exits nonzero if any check fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run only these checks (1-9); check 10 needs the full suite.
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
        /// Write the deterministic metric output here.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Run an experiment grid from a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output stem; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a power law to records in a JSONL file.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
    },
    /// Run the committed configs of one figure (`list` shows them).
    Figure {
        id: String,
        /// Directory for outputs, replacing the configs' own directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn sweep(cfg: &ExperimentConfig, out: Option<PathBuf>) -> anyhow::Result<()> {
    let stem = out
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from(&cfg.experiment));
    let mut sink = RecordSink::create(&stem)?;
    eprintln!(
        "{}: {} runs on {} workers -> {}",
        cfg.experiment,
        cfg.num_runs(),
        worker_count(),
        sink.jsonl_path.display()
    );
    let summary = run_grid(cfg, |r| sink.write(r))?;
    eprintln!(
        "{}: {} runs, {} diverged, {} records",
        cfg.experiment, summary.runs, summary.diverged, summary.records
    );
    Ok(())
}

fn run() -> anyhow::Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Verify {
            seed,
            only,
            metrics_out,
        } => {
            eprintln!("verify: master seed {seed}, {WORKERS_ENV}={}", worker_count());
            let outcomes = if only.is_empty() {
                run_suite(seed, |o| println!("{}", o.line()))?
            } else {
                let mut v = Vec::new();
                for id in only {
                    if !(1..CHECK_COUNT).contains(&id) {
                        bail!("--only takes check ids 1 to {}", CHECK_COUNT - 1);
                    }
                    let o = run_check(id, seed)?;
                    println!("{}", o.line());
                    v.push(o);
                }
                v
            };
            if let Some(path) = metrics_out {
                std::fs::write(&path, metric_output(&outcomes))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            let failed = outcomes.iter().filter(|o| !o.passed()).count();
            println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
            Ok(failed == 0)
        }
        Command::Sweep { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            sweep(&cfg, out)?;
            Ok(true)
        }
        Command::Fit { input, x, y } => {
            let records = read_jsonl(&input)?;
            let fit = fit_power_law(&records, &x, &y)?;
            println!("{}", serde_json::to_string(&fit)?);
            Ok(true)
        }
        Command::Figure { id, out_dir } => {
            if id == "list" {
                for f in FIGURES {
                    let names: Vec<&str> = f.configs.iter().map(|c| c.0).collect();
                    println!("{:<18} {} [{}]", f.id, f.description, names.join(", "));
                }
                return Ok(true);
            }
            let fig = figure(&id)?;
            for cfg in fig.parsed()? {
                let out = out_dir.as_ref().map(|d| {
                    let name = cfg
                        .output
                        .as_ref()
                        .and_then(|p| p.file_name())
                        .map(PathBuf::from)
                        .unwrap_or_else(|| PathBuf::from(&cfg.experiment));
                    d.join(name)
                });
                sweep(&cfg, out)?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
