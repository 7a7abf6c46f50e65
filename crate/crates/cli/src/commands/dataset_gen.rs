//! `dataset-gen`: materialise a procedural dataset as PNG files with a
//! train/test split manifest.

use std::path::Path;

use multidiff_core::synthdata::{
    generate_scenes, make_dataset, save_image_png, write_split_manifest, Modality,
};

use crate::config::{DataSource, RunConfig};
use crate::pipeline::{create_out_dir, runtime, validation, write_effective_config, AppError};

pub fn run(config: &RunConfig, out: &Path) -> Result<(), AppError> {
    if config.data_source != DataSource::Synth {
        return Err(validation(
            "dataset-gen materialises procedural scenes; set data.source = synth",
        ));
    }
    let mods: Vec<Modality> = config
        .data_modalities
        .iter()
        .map(|name| Modality::from_name(name))
        .collect::<Result<_, _>>()
        .map_err(validation)?;
    let split = make_dataset(
        config.data_num_scenes,
        config.data_split_fraction,
        config.data_master_seed,
    )
    .map_err(validation)?;
    create_out_dir(out)?;
    for m in &mods {
        create_out_dir(&out.join(m.name()))?;
    }
    let all_seeds: Vec<u64> = split
        .train_seeds
        .iter()
        .chain(split.test_seeds.iter())
        .copied()
        .collect();
    let scenes = generate_scenes(&all_seeds, config.codec_image_size).map_err(runtime)?;
    for scene in &scenes {
        for m in &mods {
            let img = scene.image_with_channels(*m, config.codec_channels);
            let path = out.join(m.name()).join(format!("{}.png", scene.seed));
            save_image_png(&path, &img).map_err(runtime)?;
        }
    }
    write_split_manifest(&out.join("splits.txt"), &split).map_err(runtime)?;
    write_effective_config(out, config)?;
    println!(
        "wrote {} scenes x {} modalities to {} ({} train / {} test)",
        scenes.len(),
        mods.len(),
        out.display(),
        split.train_seeds.len(),
        split.test_seeds.len()
    );
    Ok(())
}
