//! Experiment runner CLI: train, evaluate, sweep, and plot.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rusp_core::policy::ActMode;
use rusp_core::runner::{self, plots, ExperimentConfig, SweepAxis};
use rusp_core::Parallelism;

#[derive(Parser)]
#[command(
    name = "rusp",
    about = "Multi-agent RL laboratory: randomized uncertain social preferences in matrix games",
    version
)]
struct Cli {
    /// Force sequential execution (reproducible byte-for-byte).
    #[arg(long, global = true)]
    single_threaded: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment configuration.
    Train {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Train only this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue interrupted runs from their latest checkpoints.
        #[arg(long)]
        resume: bool,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under one protocol.
    Eval {
        /// Checkpoint file (ckpt_*.rckpt).
        checkpoint: PathBuf,
        /// Protocol: selfplay | reciprocity | holdout | rapport | team.
        #[arg(long)]
        protocol: String,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pick actions greedily instead of sampling.
        #[arg(long)]
        argmax: bool,
        /// Config file (defaults to config.toml beside the checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a grid of experiments over one config field.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Field to vary: sigma_max | hardness_alpha | noise_mode |
        /// past_sample_prob | partition_mode.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit SVG + CSV plots from run directories or a sweep manifest.
    Plot {
        /// Seed run directories (containing metrics.jsonl).
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        runs: Vec<PathBuf>,
        /// Sweep manifest for a heatmap panel.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Metric for the heatmap (default reciprocity margin).
        #[arg(long, default_value = "reciprocity_margin")]
        heatmap_metric: String,
        /// Output directory for the plot files.
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn parallelism(single_threaded: bool) -> Parallelism {
    if single_threaded {
        Parallelism::Sequential
    } else {
        Parallelism::auto()
    }
}

fn load_config(path: &PathBuf, out: Option<PathBuf>) -> rusp_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env_overrides();
    if let Some(out) = out {
        cfg.run.out_dir = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> rusp_core::Result<()> {
    let par = parallelism(cli.single_threaded);
    match cli.command {
        Command::Train { config, seed, resume, out } => {
            let cfg = load_config(&config, out)?;
            let outcomes = runner::run_train(&cfg, par, seed, resume)?;
            for o in outcomes {
                println!(
                    "seed {}: {} iterations{} -> {}",
                    o.seed,
                    o.iterations_run,
                    if o.stopped_early { " (early stop)" } else { "" },
                    o.dir.display()
                );
            }
        }
        Command::Eval { checkpoint, protocol, episodes, seed, argmax, config } => {
            let mode = if argmax { ActMode::Argmax } else { ActMode::Sample };
            let report = runner::run_eval(
                &checkpoint,
                config.as_deref(),
                &protocol,
                episodes,
                seed,
                mode,
                par,
            )?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Sweep { config, axis, values, resume, out } => {
            let cfg = load_config(&config, out)?;
            let axis = match (axis, values) {
                (Some(field), Some(values)) => Some(SweepAxis {
                    field,
                    values: values.split(',').map(str::trim).map(String::from).collect(),
                }),
                (None, None) => None,
                _ => {
                    return Err(rusp_core::Error::config(
                        "--axis and --values must be given together",
                    ))
                }
            };
            let cells = runner::run_sweep(&cfg, axis.as_ref(), par, resume)?;
            println!("{} cells -> {}", cells.len(), cfg.run.out_dir.display());
        }
        Command::Plot { runs, manifest, heatmap_metric, out } => {
            let mut written = Vec::new();
            if !runs.is_empty() {
                written.extend(plots::emit_plots(&runs, &out)?);
            }
            if let Some(manifest) = manifest {
                std::fs::create_dir_all(&out)?;
                written.extend(plots::emit_heatmap(
                    &manifest,
                    &heatmap_metric,
                    &out.join("heatmap"),
                )?);
            }
            if written.is_empty() {
                return Err(rusp_core::Error::config("nothing to plot: pass --runs or --manifest"));
            }
            for path in written {
                println!("wrote {}", path.display());
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
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
