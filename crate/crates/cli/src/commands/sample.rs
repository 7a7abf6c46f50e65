//! `sample`: joint unconditional generation to PNG files, optionally tiled
//! into grids.

use std::path::Path;

use multidiff_core::derive_seed;
use multidiff_core::par;
use multidiff_core::sampler::{sample_joint, SamplingPlan, Solver};
use multidiff_core::synthdata::save_image_png;

use crate::commands::{solver_name, write_manifest};
use crate::config::RunConfig;
use crate::pipeline::{
    create_out_dir, load_model, runtime, tile_grid, write_effective_config, AppError,
};

#[allow(clippy::too_many_arguments)]
pub fn run(
    config: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    seed: u64,
    steps: usize,
    solver: Solver,
    count: usize,
    grid: Option<(usize, usize)>,
    use_ema: bool,
) -> Result<(), AppError> {
    let loaded = load_model(checkpoint, config, use_ema)?;
    create_out_dir(out)?;
    write_effective_config(out, config)?;
    let schedule = config.schedule().map_err(runtime)?;
    let count = grid.map(|(r, c)| r * c).unwrap_or(count).max(1);

    let mut variance_plan = SamplingPlan::<f32>::joint(steps, solver, seed);
    variance_plan.variance = config.schedule_reverse_variance;
    let model = &loaded.model;
    let results: Vec<Result<Vec<ndarray::Array3<f32>>, String>> = par::map_range(count, |i| {
        let mut plan = variance_plan.clone();
        plan.seed = derive_seed(seed, i as u64);
        sample_joint(model, &schedule, &plan).map_err(|e| e.to_string())
    });

    let mut decoded: Vec<Vec<ndarray::Array3<f32>>> = Vec::with_capacity(count);
    for r in results {
        let latents = r.map_err(runtime)?;
        let images = latents
            .iter()
            .map(|z| loaded.codec.decode(z))
            .collect::<Result<Vec<_>, _>>()
            .map_err(runtime)?;
        decoded.push(images);
    }

    for (name_idx, name) in config.data_modalities.iter().enumerate() {
        if let Some((rows, cols)) = grid {
            let tiles: Vec<_> = decoded.iter().map(|s| s[name_idx].clone()).collect();
            let sheet = tile_grid(&tiles, rows, cols);
            save_image_png(&out.join(format!("grid_{name}.png")), &sheet).map_err(runtime)?;
        } else {
            for (i, scene) in decoded.iter().enumerate() {
                save_image_png(&out.join(format!("{name}_{i}.png")), &scene[name_idx])
                    .map_err(runtime)?;
            }
        }
    }
    write_manifest(
        out,
        config,
        seed,
        solver_name(solver),
        steps,
        &[("count", count.to_string())],
    )?;
    println!("wrote {count} joint sample(s) to {}", out.display());
    Ok(())
}
