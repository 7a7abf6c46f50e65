//! `translate`: conditional generation from provided images to the
//! requested target modalities.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use multidiff_core::sampler::{sample_conditional, SamplingPlan, Solver};
use multidiff_core::synthdata::save_image_png;

use crate::commands::{solver_name, write_manifest};
use crate::config::RunConfig;
use crate::pipeline::{
    create_out_dir, load_input_image, load_model, runtime, validation, write_effective_config,
    AppError,
};

pub struct TranslateArgs {
    /// `(modality name, image path)` conditioning inputs.
    pub inputs: Vec<(String, PathBuf)>,
    pub targets: Vec<String>,
    pub seed: u64,
    pub steps: usize,
    pub solver: Solver,
    pub use_ema: bool,
}

fn modality_index(config: &RunConfig, name: &str) -> Result<usize, AppError> {
    config
        .data_modalities
        .iter()
        .position(|m| m == name)
        .ok_or_else(|| {
            validation(format!(
                "unknown modality '{name}' (configured: {})",
                config.data_modalities.join(",")
            ))
        })
}

pub fn run(
    config: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    args: &TranslateArgs,
) -> Result<(), AppError> {
    if args.inputs.is_empty() {
        return Err(validation("translate needs at least one --input MOD=PATH"));
    }
    if args.targets.is_empty() {
        return Err(validation("translate needs at least one target modality"));
    }
    let input_ids: Vec<usize> = args
        .inputs
        .iter()
        .map(|(name, _)| modality_index(config, name))
        .collect::<Result<_, _>>()?;
    let target_ids: Vec<usize> = args
        .targets
        .iter()
        .map(|name| modality_index(config, name))
        .collect::<Result<_, _>>()?;
    if let Some(&overlap) = target_ids.iter().find(|id| input_ids.contains(id)) {
        return Err(validation(format!(
            "modality '{}' appears in both inputs and targets",
            config.data_modalities[overlap]
        )));
    }
    if input_ids.len() >= config.model_num_modalities {
        return Err(validation(
            "inputs cover all modalities: nothing to generate",
        ));
    }

    let loaded = load_model(checkpoint, config, args.use_ema)?;
    let schedule = config.schedule().map_err(runtime)?;
    create_out_dir(out)?;
    write_effective_config(out, config)?;

    let mut conditions = BTreeMap::new();
    let mut encode_rng = ChaCha8Rng::seed_from_u64(args.seed);
    for ((name, path), id) in args.inputs.iter().zip(input_ids.iter()) {
        let image = load_input_image(path, config)?;
        let latent = loaded.codec.encode(&image, &mut encode_rng).map_err(runtime)?;
        let _ = name;
        conditions.insert(*id, latent);
    }
    let mut plan = SamplingPlan::conditional(conditions, args.steps, args.solver, args.seed);
    plan.variance = config.schedule_reverse_variance;
    let latents = sample_conditional(&loaded.model, &schedule, &plan).map_err(validation)?;

    for (&id, name) in target_ids.iter().zip(args.targets.iter()) {
        let image = loaded.codec.decode(&latents[id]).map_err(runtime)?;
        save_image_png(&out.join(format!("{name}_{}.png", args.seed)), &image)
            .map_err(runtime)?;
    }
    write_manifest(
        out,
        config,
        args.seed,
        solver_name(args.solver),
        args.steps,
        &[
            (
                "inputs",
                args.inputs
                    .iter()
                    .map(|(m, _)| m.as_str())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("targets", args.targets.join(",")),
        ],
    )?;
    println!(
        "translated {} -> {} (seed {})",
        args.inputs
            .iter()
            .map(|(m, _)| m.as_str())
            .collect::<Vec<_>>()
            .join(","),
        args.targets.join(","),
        args.seed
    );
    Ok(())
}
