//! `train`: fit the denoiser on the configured dataset, logging
//! `step, loss, lr` lines and writing periodic checkpoints.

use std::io::Write;
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multidiff_core::backbone::DenoiserModel;
use multidiff_core::checkpoint::TensorArchive;
use multidiff_core::codec::Codec;
use multidiff_core::derive_seed;
use multidiff_core::trainer::TrainState;

use crate::config::RunConfig;
use crate::pipeline::{
    build_codec, build_dataset, create_out_dir, encode_dataset, runtime, validation,
    write_effective_config, AppError,
};

const BATCH_STREAM: u64 = 0xBA7C;

pub fn run(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<(), AppError> {
    create_out_dir(out)?;
    write_effective_config(out, config)?;

    let dataset = build_dataset(config)?;
    let resume_archive = match resume {
        Some(path) => Some(TensorArchive::load(path).map_err(runtime)?),
        None => None,
    };
    let codec = build_codec(config, &dataset.train_images, resume_archive.as_ref())?;
    let latents = encode_dataset(&codec, &dataset.train_images, config.train_seed)?;
    if latents.is_empty() {
        return Err(validation("training split is empty"));
    }

    let schedule = config.schedule().map_err(validation)?;
    let train_config = config.train_config();
    let mut state = match &resume_archive {
        Some(archive) => {
            let fresh = DenoiserModel::<f32>::new(config.model_config(), config.model_init_seed)
                .map_err(validation)?;
            TrainState::from_archive(archive, fresh, schedule, train_config).map_err(runtime)?
        }
        None => {
            let model = DenoiserModel::<f32>::new(config.model_config(), config.model_init_seed)
                .map_err(validation)?;
            TrainState::new(model, schedule, train_config).map_err(validation)?
        }
    };
    println!(
        "training {} parameters on {} scenes ({} steps, batch {})",
        state.model().param_count(),
        latents.len(),
        config.train_total_steps,
        config.train_batch_size
    );

    let log_path = out.join("train_log.csv");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| runtime(format!("cannot open {}: {e}", log_path.display())))?;

    let batch_stream = derive_seed(config.train_seed, BATCH_STREAM);
    let started = std::time::Instant::now();
    while state.step() < config.train_total_steps {
        // a fresh per-step stream keeps batch selection identical across
        // resumes
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(batch_stream, state.step()));
        let batch: Vec<_> = (0..config.train_batch_size)
            .map(|_| latents[batch_rng.gen_range(0..latents.len())].clone())
            .collect();
        let stats = state.training_step(&batch).map_err(runtime)?;
        writeln!(log, "{}, {}, {}", stats.step, stats.loss, stats.lr)
            .map_err(|e| runtime(format!("log write failed: {e}")))?;
        if stats.step % config.train_log_every == 0 || stats.step + 1 == config.train_total_steps {
            println!(
                "step {:>6}  loss {:.4}  lr {:.2e}  grad_norm {:.3}  [{:.0?}]",
                stats.step,
                stats.loss,
                stats.lr,
                stats.grad_norm,
                started.elapsed()
            );
        }
        if config.train_checkpoint_every > 0
            && state.step() % config.train_checkpoint_every == 0
            && state.step() < config.train_total_steps
        {
            save(&state, &codec, &out.join(format!("checkpoint-{}.ckpt", state.step())))?;
        }
    }
    let final_path = out.join("model.ckpt");
    save(&state, &codec, &final_path)?;
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

fn save(state: &TrainState, codec: &Codec, path: &Path) -> Result<(), AppError> {
    let mut archive = state.to_archive();
    codec.write_to_archive(&mut archive, "codec").map_err(runtime)?;
    archive.save(path).map_err(runtime)
}
