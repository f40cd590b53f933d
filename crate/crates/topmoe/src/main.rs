use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use topmoe::artifacts::RunLayout;
use topmoe::commands::{cmd_baseline, cmd_distill, cmd_evaluate, cmd_interpret, cmd_train};
use topmoe::config::RUN_CONFIG_SCHEMA;
use topmoe::sweep::{run_sweep, SweepConfig};
use topmoe::{CliError, Result, RunConfig};
use topmoe_core::envs::EnvKind;
use topmoe_core::eval::{DEFAULT_EPISODES, DEFAULT_HORIZON};

#[derive(Parser)]
#[command(name = "topmoe", version, about = "Sparse top-1 mixture-of-experts controllers")]
struct Cli {
    /// Run configuration (sweep configuration for `sweep`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing run directories.
    #[arg(long, global = true)]
    force: bool,
    /// Parallel runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed, then evaluate it.
    Train {
        /// Used when no --config is given.
        #[arg(long)]
        env: Option<EnvKind>,
    },
    /// Deterministic evaluation of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPISODES)]
        episodes: usize,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
    },
    /// Fit one decision tree per expert to the router's choices.
    Distill {
        /// Run directory; supplies checkpoint, buffer and output defaults.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        buffer: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        depth: usize,
    },
    /// Write equations, coefficient heatmaps and the markdown report.
    Interpret {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1.5)]
        threshold: f64,
    },
    /// Train and evaluate a grid of configurations.
    Sweep,
    /// Average return of uniformly random actions.
    Baseline {
        #[arg(long)]
        env: EnvKind,
        #[arg(long, default_value_t = DEFAULT_EPISODES)]
        episodes: usize,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
    },
    /// Print the run configuration JSON schema.
    Schema,
}

fn pick(explicit: Option<PathBuf>, run: &Option<PathBuf>, what: &str, from_run: impl Fn(&RunLayout) -> PathBuf) -> Result<PathBuf> {
    explicit
        .or_else(|| run.as_ref().map(|r| from_run(&RunLayout { root: r.clone() })))
        .ok_or_else(|| CliError::usage(format!("pass --run or --{what}")))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Train { env } => {
            let mut cfg = match (&cli.config, env) {
                (Some(path), _) => RunConfig::load(path)?,
                (None, Some(env)) => RunConfig::new(env),
                (None, None) => return Err(CliError::usage("pass --config or --env")),
            };
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            if let Some(out) = cli.out {
                cfg.out_dir = out;
            }
            let (runs, report) = cmd_train(&cfg, cli.jobs, cli.force)?;
            for r in &runs {
                println!("{}\tseed {}\tER {:.4}", r.layout.root.display(), r.eval.seed, r.eval.evaluation.mean);
            }
            print_json(&report);
        }
        Command::Evaluate { checkpoint, episodes, horizon } => {
            print_json(&cmd_evaluate(&checkpoint, episodes, horizon, seed)?);
        }
        Command::Distill { run, checkpoint, buffer, depth } => {
            let checkpoint = pick(checkpoint, &run, "checkpoint", RunLayout::final_checkpoint)?;
            let buffer = pick(buffer, &run, "buffer", RunLayout::replay_states)?;
            let out = pick(cli.out, &run, "out", RunLayout::distill)?;
            let summary = cmd_distill(&checkpoint, &buffer, depth, &out)?;
            for f in &summary.fidelity {
                println!("expert {}\tbalanced accuracy {:.4}", f.expert + 1, f.balanced_accuracy);
            }
        }
        Command::Interpret { run, checkpoint, threshold } => {
            let checkpoint = pick(checkpoint, &run, "checkpoint", RunLayout::final_checkpoint)?;
            let out = pick(cli.out, &run, "out", RunLayout::report)?;
            println!("{}", cmd_interpret(&checkpoint, threshold, &out)?.report.display());
        }
        Command::Sweep => {
            let path = cli.config.ok_or_else(|| CliError::usage("sweep needs --config"))?;
            let mut cfg = SweepConfig::load(&path)?;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            if let Some(out) = cli.out {
                cfg.base.out_dir = out;
            }
            let outcome = run_sweep(&cfg, cli.jobs)?;
            println!("{}", outcome.dir.display());
        }
        Command::Baseline { env, episodes, horizon } => {
            print_json(&cmd_baseline(env, None, episodes, horizon, seed)?);
        }
        Command::Schema => print!("{RUN_CONFIG_SCHEMA}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
