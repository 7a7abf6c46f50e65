//! `loop`: iterative self-conditioning across a modality cycle, recording
//! every hop and, when the scene ground truth is known, a per-hop drift
//! series.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use multidiff_core::sampler::{loop_translate, Solver};
use multidiff_core::synthdata::{generate_scene, save_image_png, Modality};

use crate::commands::{solver_name, write_manifest};
use crate::config::RunConfig;
use crate::pipeline::{
    create_out_dir, load_input_image, load_model, runtime, validation, write_effective_config,
    AppError,
};

pub struct LoopArgs {
    /// Start latent source: an image file, or a synthetic scene seed whose
    /// ground truth also enables the drift series.
    pub start_image: Option<PathBuf>,
    pub scene_seed: Option<u64>,
    pub cycle: Vec<String>,
    pub iterations: usize,
    pub seed: u64,
    pub steps: usize,
    pub solver: Solver,
    pub use_ema: bool,
}

pub fn run(
    config: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    args: &LoopArgs,
) -> Result<(), AppError> {
    if args.cycle.len() < 2 {
        return Err(validation("loop needs a cycle of at least two modalities"));
    }
    let cycle_ids: Vec<usize> = args
        .cycle
        .iter()
        .map(|name| {
            config
                .data_modalities
                .iter()
                .position(|m| m == name)
                .ok_or_else(|| validation(format!("unknown modality '{name}'")))
        })
        .collect::<Result<_, _>>()?;

    let loaded = load_model(checkpoint, config, args.use_ema)?;
    let schedule = config.schedule().map_err(runtime)?;
    create_out_dir(out)?;
    write_effective_config(out, config)?;

    // ground-truth images per modality, when a synthetic scene seeds the loop
    let scene = match (args.scene_seed, &args.start_image) {
        (Some(seed), _) => Some(generate_scene(seed, config.codec_image_size).map_err(validation)?),
        (None, Some(_)) => None,
        (None, None) => {
            return Err(validation(
                "loop needs either --start-image or --scene-seed",
            ))
        }
    };
    let start_image = match (&scene, &args.start_image) {
        (Some(scene), _) => {
            let m = Modality::from_name(&args.cycle[0]).map_err(validation)?;
            scene.image_with_channels(m, config.codec_channels)
        }
        (None, Some(path)) => load_input_image(path, config)?,
        _ => unreachable!(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let start_latent = loaded.codec.encode(&start_image, &mut rng).map_err(runtime)?;

    let hops = loop_translate(
        &loaded.model,
        &schedule,
        start_latent,
        &cycle_ids,
        args.iterations,
        args.steps,
        args.solver,
        args.seed,
    )
    .map_err(validation)?;

    let mut drift_rows: Vec<(usize, String, f64)> = Vec::new();
    for (hop, (modality_id, latent)) in hops.iter().enumerate() {
        let name = &config.data_modalities[*modality_id];
        let image = loaded.codec.decode(latent).map_err(runtime)?;
        save_image_png(&out.join(format!("hop_{hop:02}_{name}.png")), &image)
            .map_err(runtime)?;
        if let Some(scene) = &scene {
            let m = Modality::from_name(name).map_err(validation)?;
            let truth = scene.image_with_channels(m, config.codec_channels);
            let mse = (&image - &truth)
                .iter()
                .map(|&d| (d as f64) * (d as f64))
                .sum::<f64>()
                / truth.len() as f64;
            drift_rows.push((hop, name.clone(), mse));
        }
    }
    if !drift_rows.is_empty() {
        let path = out.join("drift.csv");
        let mut file = std::fs::File::create(&path)
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
        writeln!(file, "hop,modality,mse_vs_ground_truth").map_err(runtime)?;
        println!("per-hop drift against scene ground truth:");
        for (hop, name, mse) in &drift_rows {
            writeln!(file, "{hop},{name},{mse}").map_err(runtime)?;
            println!("  hop {hop:>2} {name:<14} mse {mse:.5}");
        }
    }
    write_manifest(
        out,
        config,
        args.seed,
        solver_name(args.solver),
        args.steps,
        &[
            ("cycle", args.cycle.join(",")),
            ("iterations", args.iterations.to_string()),
        ],
    )?;
    println!(
        "loop of {} hop(s) over [{}] written to {}",
        args.iterations,
        args.cycle.join(","),
        out.display()
    );
    Ok(())
}
