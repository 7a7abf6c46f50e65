//! Command-line surface: dataset generation, training, sampling,
//! translation, looping and evaluation over one human-readable config file.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error. The
//! `MULTIDIFF_NUM_THREADS` environment variable caps worker parallelism.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_solver, RunConfig};
use multidiff_core::sampler::Solver;
use pipeline::{validation, AppError};

#[derive(Parser)]
#[command(
    name = "multidiff",
    about = "Multi-modal sequence diffusion: train once, generate jointly or translate between any subset of modalities",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (`section.key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and the effective-config echo.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SamplingArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Base sampling seed (default: sample.seed from the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Solver steps (default: sample.num_steps from the config).
    #[arg(long)]
    steps: Option<usize>,
    /// Solver: ancestral or dpmpp (default: sample.solver from the config).
    #[arg(long)]
    solver: Option<String>,
    /// Sample with the raw training weights instead of the EMA shadow.
    #[arg(long)]
    raw_weights: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural multi-modal dataset as PNGs plus a split
    /// manifest.
    DatasetGen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the denoiser (optionally resuming from a checkpoint).
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Joint unconditional generation to PNGs.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Number of scenes to sample.
        #[arg(long)]
        count: Option<usize>,
        /// Tile samples into an NxM grid per modality (e.g. --grid 4x4).
        #[arg(long)]
        grid: Option<String>,
    },
    /// Conditional generation: translate input modalities to targets.
    Translate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Conditioning input, repeatable: MODALITY=IMAGE.png
        #[arg(long = "input", value_name = "MOD=PATH")]
        inputs: Vec<String>,
        /// Comma-separated target modalities.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
    },
    /// Iterative self-conditioned translation around a modality cycle.
    Loop {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Start image file for the first modality in the cycle.
        #[arg(long)]
        start_image: Option<PathBuf>,
        /// Synthetic scene seed to start from (enables the drift series).
        #[arg(long)]
        scene_seed: Option<u64>,
        /// Comma-separated modality cycle, e.g. optical,radar_like.
        #[arg(long, value_delimiter = ',')]
        cycle: Vec<String>,
        /// Number of hops.
        #[arg(long, default_value_t = 8)]
        iterations: usize,
    },
    /// Generate samples and report FID / precision / recall / F-score per
    /// target modality.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Condition generation on this modality (omit for joint sampling).
        #[arg(long)]
        condition: Option<String>,
        /// Real/generated sample count (default: eval.num_samples).
        #[arg(long)]
        num_samples: Option<usize>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, AppError> {
    match path {
        Some(p) => RunConfig::parse_file(p).map_err(validation),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_sampling(
    config: &RunConfig,
    args: &SamplingArgs,
) -> Result<(u64, usize, Solver, bool), AppError> {
    let seed = args.seed.unwrap_or(config.sample_seed);
    let steps = args.steps.unwrap_or(config.sample_num_steps);
    if steps == 0 {
        return Err(validation("--steps must be >= 1"));
    }
    let solver = match &args.solver {
        Some(s) => parse_solver(s).map_err(validation)?,
        None => config.sample_solver,
    };
    let use_ema = if args.raw_weights {
        false
    } else {
        config.sample_use_ema
    };
    Ok((seed, steps, solver, use_ema))
}

fn parse_grid(spec: &str) -> Result<(usize, usize), AppError> {
    let (r, c) = spec
        .split_once(['x', 'X'])
        .ok_or_else(|| validation(format!("--grid expects NxM, got '{spec}'")))?;
    let rows = r
        .parse::<usize>()
        .map_err(|_| validation(format!("bad grid rows '{r}'")))?;
    let cols = c
        .parse::<usize>()
        .map_err(|_| validation(format!("bad grid cols '{c}'")))?;
    if rows == 0 || cols == 0 {
        return Err(validation("grid dimensions must be positive"));
    }
    Ok((rows, cols))
}

fn parse_input_pair(spec: &str) -> Result<(String, PathBuf), AppError> {
    let (modality, path) = spec
        .split_once('=')
        .ok_or_else(|| validation(format!("--input expects MOD=PATH, got '{spec}'")))?;
    Ok((modality.trim().to_string(), PathBuf::from(path.trim())))
}

fn configure_thread_pool() {
    if let Ok(value) = std::env::var("MULTIDIFF_NUM_THREADS") {
        match value.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring MULTIDIFF_NUM_THREADS = '{value}'"),
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::DatasetGen { common } => {
            let config = load_config(&common.config)?;
            commands::dataset_gen::run(&config, &common.out)
        }
        Command::Train { common, checkpoint } => {
            let config = load_config(&common.config)?;
            commands::train::run(&config, &common.out, checkpoint.as_deref())
        }
        Command::Sample {
            common,
            sampling,
            count,
            grid,
        } => {
            let config = load_config(&common.config)?;
            let (seed, steps, solver, use_ema) = resolve_sampling(&config, &sampling)?;
            let grid = grid.as_deref().map(parse_grid).transpose()?;
            commands::sample::run(
                &config,
                &sampling.checkpoint,
                &common.out,
                seed,
                steps,
                solver,
                count.unwrap_or(config.sample_count),
                grid,
                use_ema,
            )
        }
        Command::Translate {
            common,
            sampling,
            inputs,
            targets,
        } => {
            let config = load_config(&common.config)?;
            let (seed, steps, solver, use_ema) = resolve_sampling(&config, &sampling)?;
            let inputs = inputs
                .iter()
                .map(|s| parse_input_pair(s))
                .collect::<Result<Vec<_>, _>>()?;
            let args = commands::translate::TranslateArgs {
                inputs,
                targets,
                seed,
                steps,
                solver,
                use_ema,
            };
            commands::translate::run(&config, &sampling.checkpoint, &common.out, &args)
        }
        Command::Loop {
            common,
            sampling,
            start_image,
            scene_seed,
            cycle,
            iterations,
        } => {
            let config = load_config(&common.config)?;
            let (seed, steps, solver, use_ema) = resolve_sampling(&config, &sampling)?;
            let args = commands::loop_chain::LoopArgs {
                start_image,
                scene_seed,
                cycle,
                iterations,
                seed,
                steps,
                solver,
                use_ema,
            };
            commands::loop_chain::run(&config, &sampling.checkpoint, &common.out, &args)
        }
        Command::Evaluate {
            common,
            sampling,
            condition,
            num_samples,
        } => {
            let config = load_config(&common.config)?;
            let (seed, steps, solver, use_ema) = resolve_sampling(&config, &sampling)?;
            let args = commands::evaluate::EvaluateArgs {
                condition,
                num_samples: num_samples.unwrap_or(config.eval_num_samples),
                seed,
                steps,
                solver,
                use_ema,
            };
            commands::evaluate::run(&config, &sampling.checkpoint, &common.out, &args)
        }
    }
}

fn main() -> ExitCode {
    configure_thread_pool();
    // usage errors are validation failures: exit 1 per the contract
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
