//! `chaoscal` — parameter estimation for chaotic dynamical systems.
//!
//! Subcommands: `gen-data`, `train`, `estimate`, `evaluate`, `heatmap`.
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

use chaoscal_core::error::CoreError;
use chaoscal_core::nn::load_checkpoint;
use chaoscal_core::pipeline::{
    cmd_estimate, cmd_evaluate, cmd_heatmap, cmd_train, gen_data, DatasetKind, EstimateMode,
    HeatmapObjective, ObservationSource, RunConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "chaoscal",
    about = "Simulate chaotic systems, train contrastive embeddings and emulators, and invert parameters with ensemble Kalman inversion",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Force single-threaded execution for bit-exact reproducibility.
    #[arg(long)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Train,
    Test,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Emulate,
    Head,
}

impl From<ModeArg> for EstimateMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => EstimateMode::Baseline,
            ModeArg::Emulate => EstimateMode::Emulate,
            ModeArg::Head => EstimateMode::Head,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Moment,
    Emulator,
}

#[derive(Subcommand)]
enum Command {
    /// Draw parameters, simulate trajectories, and filter the results.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Which split to generate.
        #[arg(long, value_enum, default_value = "both")]
        kind: KindArg,
    },
    /// Train the encoder, regression head, and emulator.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training dataset manifest from gen-data.
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
    },
    /// Estimate parameters for one observation or a whole test dataset.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Checkpoint from train (required for emulate/head modes).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Single observation trajectory (.bin with .json sidecar).
        #[arg(long, value_name = "PATH", conflicts_with = "dataset")]
        observation: Option<PathBuf>,
        /// Dataset manifest; estimates every accepted record.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Score point estimates and ensembles against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        estimates: PathBuf,
        #[arg(long, value_name = "PATH")]
        truths: PathBuf,
        /// Directory holding ensemble_XXXXXX.csv files for CRPS.
        #[arg(long, value_name = "DIR")]
        ensembles: Option<PathBuf>,
        /// Method label stamped into the report.
        #[arg(long, default_value = "estimate")]
        method: String,
    },
    /// Objective-landscape grid over two free parameter components.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        objective: ObjectiveArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        observation: PathBuf,
        /// Free component indexes as "i,j".
        #[arg(long, value_name = "I,J")]
        pair: String,
        #[arg(long, default_value_t = 25)]
        resolution: usize,
        /// Clip threshold for the moment objective (default 100).
        #[arg(long)]
        clip: Option<f64>,
    },
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Config(_)) | Some(CoreError::InvalidArgument(_)) => 2,
        Some(CoreError::Numerical(_))
        | Some(CoreError::Diverged { .. })
        | Some(CoreError::NonFinite(_))
        | Some(CoreError::NonFiniteGradient { .. }) => 3,
        _ => 1,
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn setup_threads(common: &Common) -> anyhow::Result<()> {
    let threads = if common.deterministic {
        Some(1)
    } else {
        common.threads
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

fn parse_pair(s: &str) -> anyhow::Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        anyhow::bail!(CoreError::config(format!("--pair expects \"i,j\", got {s}")));
    }
    let i = parts[0]
        .trim()
        .parse()
        .map_err(|_| CoreError::config("bad pair index"))?;
    let j = parts[1]
        .trim()
        .parse()
        .map_err(|_| CoreError::config("bad pair index"))?;
    Ok((i, j))
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData { common, kind } => {
            setup_threads(&common)?;
            let config = load_config(&common)?;
            let kinds: &[DatasetKind] = match kind {
                KindArg::Train => &[DatasetKind::Train],
                KindArg::Test => &[DatasetKind::Test],
                KindArg::Both => &[DatasetKind::Train, DatasetKind::Test],
            };
            for k in kinds {
                let manifest = gen_data(&config, *k, &common.out)?;
                if manifest.n_accepted < manifest.n_requested {
                    eprintln!(
                        "warning: {} split kept {} of {} requested samples",
                        k.stem(),
                        manifest.n_accepted,
                        manifest.n_requested
                    );
                }
                println!(
                    "{}: {} accepted / {} requested -> {}",
                    k.stem(),
                    manifest.n_accepted,
                    manifest.n_requested,
                    common.out.display()
                );
            }
        }
        Command::Train { common, dataset } => {
            setup_threads(&common)?;
            let config = load_config(&common)?;
            let result = cmd_train(&config, &dataset, &common.out)?;
            println!(
                "trained {} epochs; validation MAPE {:.2}% -> {:.2}% (best at epoch {})",
                result.epochs_run,
                result.initial_val_mape,
                result.best_val_mape,
                result.best_epoch
            );
            println!("checkpoint: {}", result.checkpoint_path.display());
            println!("log: {}", result.log_path.display());
        }
        Command::Estimate {
            common,
            mode,
            checkpoint,
            observation,
            dataset,
        } => {
            setup_threads(&common)?;
            let config = load_config(&common)?;
            let ckpt = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let source = match (&observation, &dataset) {
                (Some(obs), None) => ObservationSource::Single(obs),
                (None, Some(man)) => ObservationSource::Dataset(man),
                _ => {
                    anyhow::bail!(CoreError::config(
                        "estimate needs exactly one of --observation or --dataset"
                    ))
                }
            };
            let output = cmd_estimate(&config, mode.into(), ckpt.as_ref(), source, &common.out)?;
            println!(
                "estimated {} instance(s) -> {}",
                output.instances.len(),
                output.estimates_path.display()
            );
        }
        Command::Evaluate {
            common,
            estimates,
            truths,
            ensembles,
            method,
        } => {
            setup_threads(&common)?;
            let config = load_config(&common)?;
            let output = cmd_evaluate(
                &config,
                &estimates,
                &truths,
                ensembles.as_deref(),
                &method,
                &common.out,
            )?;
            for (j, name) in output.report.components.iter().enumerate() {
                println!(
                    "{name}: MAPE {:.2}% MdAPE {:.2}% CRPS {:.4}",
                    output.report.mape[j], output.report.mdape[j], output.report.crps[j]
                );
            }
            println!("report: {}", output.json_path.display());
        }
        Command::Heatmap {
            common,
            objective,
            checkpoint,
            observation,
            pair,
            resolution,
            clip,
        } => {
            setup_threads(&common)?;
            let config = load_config(&common)?;
            let ckpt = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let pair = parse_pair(&pair)?;
            let objective = match objective {
                ObjectiveArg::Moment => HeatmapObjective::Moment,
                ObjectiveArg::Emulator => HeatmapObjective::Emulator,
            };
            let output = cmd_heatmap(
                &config,
                objective,
                ckpt.as_ref(),
                &observation,
                pair,
                resolution,
                None,
                clip,
                &common.out,
            )?;
            println!(
                "grid {resolution}x{resolution}; argmin cell {:?}, truth cell {:?}",
                output.grid.argmin, output.grid.truth_cell
            );
            println!("csv: {}", output.csv_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
