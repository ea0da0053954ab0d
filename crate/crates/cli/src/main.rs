//! `bgcut`: dataset generation, two-stage training, pruning, inference,
//! evaluation, benchmarking and compositing.

use std::path::PathBuf;
use std::process::ExitCode;

use bgcut::tensor::parallel;
use bgcut::{BgError, Result};
use clap::{Args, Parser, Subcommand};

use bgcut_cli::commands;
use bgcut_cli::config::Config;

/// Exit code for malformed arguments and environment.
const USAGE_EXIT: u8 = 2;

#[derive(Parser)]
#[command(name = "bgcut", version, about = "Automatic background cut for portrait video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every config-driven subcommand accepts.
#[derive(Args)]
struct Overrides {
    /// Override one config value, e.g. `--set train.base_lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset tools.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train the stage-1 network or the full stage-2 models.
    Train {
        #[command(subcommand)]
        stage: Stage,
    },
    /// Iteratively prune and fine-tune a stage-1 network.
    Prune {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Segment every clip of a manifest into mask PNGs.
    Infer {
        manifest: PathBuf,
        checkpoint: PathBuf,
        /// Directory of background-sample PNGs used for every clip instead of
        /// the manifest's own samples.
        #[arg(long)]
        bg: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against a manifest's ground truth.
    Eval {
        pred_dir: PathBuf,
        manifest: PathBuf,
        /// Comma-separated trimap half-widths.
        #[arg(long, value_delimiter = ',')]
        band_widths: Option<Vec<usize>>,
        /// Report directory; defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Per-stage latency of a checkpoint at one frame size.
    Bench {
        checkpoint: PathBuf,
        #[arg(long, default_value = "128x128")]
        size: String,
        /// Let kernels use the thread pool; the default is single-threaded.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Blend frames over a new background using their masks.
    Composite {
        clip: PathBuf,
        masks: PathBuf,
        background: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Edge feathering radius in pixels.
        #[arg(long)]
        feather: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the default configuration as TOML.
    Config {
        /// Print the given file merged with the defaults instead.
        file: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Render the synthetic suite described by the `[dataset]` section.
    Gen {
        spec: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Subcommand)]
enum Stage {
    Stage1 {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    Stage2 {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Caps kernel parallelism from `BGCUT_THREADS`; 1 disables the pool.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("BGCUT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| BgError::Config(format!("BGCUT_THREADS={raw:?} is not a positive integer")))?;
    parallel::init_thread_pool(threads);
    if threads == 1 {
        parallel::set_parallel(false);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let load = |path: Option<&PathBuf>, o: &Overrides| Config::load(path.map(PathBuf::as_path), &o.set);
    match cli.command {
        Command::Dataset {
            action: DatasetAction::Gen { spec, out, overrides },
        } => commands::dataset_gen(&load(Some(&spec), &overrides)?, &out),
        Command::Train {
            stage: Stage::Stage1 { config, overrides },
        } => commands::train_stage_one(&load(Some(&config), &overrides)?),
        Command::Train {
            stage: Stage::Stage2 { config, overrides },
        } => commands::train_stage_two(&load(Some(&config), &overrides)?),
        Command::Prune { config, overrides } => commands::prune(&load(Some(&config), &overrides)?),
        Command::Infer {
            manifest,
            checkpoint,
            bg,
            out,
        } => commands::infer(&manifest, &checkpoint, bg.as_deref(), &out),
        Command::Eval {
            pred_dir,
            manifest,
            band_widths,
            out,
            config,
            overrides,
        } => {
            let cfg = load(config.as_ref(), &overrides)?;
            let widths = band_widths.unwrap_or(cfg.eval.band_widths);
            commands::eval(&pred_dir, &manifest, &widths, out.as_deref())
        }
        Command::Bench {
            checkpoint,
            size,
            parallel,
            config,
            overrides,
        } => {
            let cfg = load(config.as_ref(), &overrides)?;
            commands::run_bench(&cfg, &checkpoint, commands::parse_size(&size)?, parallel)
        }
        Command::Composite {
            clip,
            masks,
            background,
            out,
            feather,
            config,
            overrides,
        } => {
            let mut cfg = load(config.as_ref(), &overrides)?;
            if let Some(f) = feather {
                cfg.composite.feather = f;
            }
            commands::composite_clip(&cfg, &clip, &masks, &background, &out)
        }
        Command::Config { file, overrides } => {
            print!("{}", load(file.as_ref(), &overrides)?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE_EXIT } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
