use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pompc::trainer::{evaluate, metrics::export_curves, random_policy_baseline};
use pompc::verify::{run_suite, Outcome, SuiteOptions};
use pompc::{TrainConfig, Trainer};

/// Policy-guided MPPI with an adaptive prior, on toy control tasks.
#[derive(Debug, Parser)]
#[command(name = "pompc", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an agent. `POMPC_SEED` overrides the configured seed.
    Train {
        /// TOML config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override, e.g. `--set lambda=0` or `--set planner.horizon=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "overrides"])]
        resume: Option<PathBuf>,
        /// Print nothing per episode.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint with deterministic planning.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the invariant and oracle suite and print a pass/fail table.
    Verify {
        /// Include the desk-scale learning run.
        #[arg(long)]
        full: bool,
        /// Only these criterion ids.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
    },
    /// Print the effective config as TOML.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Start from the desk-scale preset instead of the full-size defaults.
        #[arg(long)]
        desk: bool,
    },
    /// Extract the per-episode learning curve from a metrics file.
    ExportCurves {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Train {
            config,
            overrides,
            resume,
            quiet,
        } => train(config, overrides, resume, quiet),
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let t = Trainer::load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let report = evaluate(&t.agent, t.config(), episodes, seed)?;
            match report.ci95 {
                Some(ci) => println!("mean return {:.2} +- {:.2} over {episodes} episodes", report.mean, ci),
                None => println!("mean return {:.2} over 1 episode", report.mean),
            }
            let baseline = random_policy_baseline(t.config().env.name, episodes, seed)?;
            println!("random policy {:.2}", baseline.mean);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { full, only } => {
            let opts = SuiteOptions {
                full,
                only,
                ..SuiteOptions::default()
            };
            let mut failed = false;
            for r in run_suite(&opts) {
                println!("{r}");
                failed |= r.outcome == Outcome::Fail;
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Config {
            config,
            overrides,
            desk,
        } => {
            let cfg = match (desk, config) {
                (true, Some(_)) => bail!("--desk and --config are exclusive"),
                (true, None) => TrainConfig::parse(&TrainConfig::desk().to_toml(), &overrides)?,
                (false, path) => TrainConfig::load(path.as_deref(), &overrides)?,
            };
            print!("{}", cfg.to_toml());
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportCurves { metrics, out } => {
            let n = export_curves(&metrics, &out).with_context(|| format!("reading {}", metrics.display()))?;
            println!("wrote {n} episodes to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn train(config: Option<PathBuf>, mut overrides: Vec<String>, resume: Option<PathBuf>, quiet: bool) -> Result<ExitCode> {
    let mut t = match resume {
        Some(path) => Trainer::load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            if let Ok(seed) = std::env::var("POMPC_SEED") {
                if seed.trim().parse::<u64>().is_err() {
                    bail!("POMPC_SEED must be an unsigned integer, got {seed:?}");
                }
                overrides.push(format!("seed={}", seed.trim()));
            }
            let cfg = TrainConfig::load(config.as_deref(), &overrides)?;
            ensure_dirs(&cfg)?;
            Trainer::new(cfg)?
        }
    };
    ensure_dirs(t.config())?;
    let total = t.config().total_steps;
    let mut seen = t.episode_returns().len();
    while t.env_steps() < total {
        t.step()?;
        let rets = t.episode_returns();
        if rets.len() > seen {
            seen = rets.len();
            if !quiet {
                println!("episode {seen:>4}  step {:>7}  return {:>9.2}", t.env_steps(), rets[seen - 1]);
            }
        }
    }
    t.run()?;
    let ckpt = t.config().checkpoint_path.clone();
    if !ckpt.is_empty() {
        t.save_checkpoint(ckpt.as_ref())?;
        println!("checkpoint written to {ckpt}");
    }
    println!("{} steps, {} updates, {} episodes", t.env_steps(), t.updates(), seen);
    Ok(ExitCode::SUCCESS)
}

fn ensure_dirs(cfg: &TrainConfig) -> Result<()> {
    for path in [&cfg.metrics_path, &cfg.checkpoint_path] {
        if let Some(dir) = Path::new(path).parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}
