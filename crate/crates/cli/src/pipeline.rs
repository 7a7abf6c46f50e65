//! Shared plumbing for the CLI commands: dataset assembly, codec setup,
//! checkpoint IO and the validation/runtime error split that drives exit
//! codes.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use multidiff_core::backbone::DenoiserModel;
use multidiff_core::checkpoint::TensorArchive;
use multidiff_core::codec::{AeTrainConfig, Codec, CodecKind, TinyAutoencoder};
use multidiff_core::derive_seed;
use multidiff_core::synthdata::{
    generate_scenes, load_paired_directory, make_dataset, to_grayscale, Modality,
};
use multidiff_core::trainer::TrainState;

use crate::config::{DataSource, RunConfig};

/// Validation failures exit 1, runtime failures exit 2.
#[derive(Debug)]
pub enum AppError {
    Validation(String),
    Runtime(String),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Validation(m) => write!(f, "{m}"),
            AppError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

pub fn validation(e: impl std::fmt::Display) -> AppError {
    AppError::Validation(e.to_string())
}

pub fn runtime(e: impl std::fmt::Display) -> AppError {
    AppError::Runtime(e.to_string())
}

/// Aligned images for every scene, already at the configured channel count
/// and in the config's modality order.
pub struct Dataset {
    /// `[scene][modality]` images in `[0, 1]`.
    pub train_images: Vec<Vec<Array3<f32>>>,
    pub test_images: Vec<Vec<Array3<f32>>>,
}

/// Builds the dataset the config describes: procedural scenes or a paired
/// directory.
pub fn build_dataset(config: &RunConfig) -> Result<Dataset, AppError> {
    let channels = config.codec_channels;
    let size = config.codec_image_size;
    match config.data_source {
        DataSource::Synth => {
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
            let images_for = |seeds: &[u64]| -> Result<Vec<Vec<Array3<f32>>>, AppError> {
                let scenes = generate_scenes(seeds, size).map_err(runtime)?;
                Ok(scenes
                    .iter()
                    .map(|scene| {
                        mods.iter()
                            .map(|&m| scene.image_with_channels(m, channels))
                            .collect()
                    })
                    .collect())
            };
            Ok(Dataset {
                train_images: images_for(&split.train_seeds)?,
                test_images: images_for(&split.test_seeds)?,
            })
        }
        DataSource::Directory => {
            let root = PathBuf::from(&config.data_root);
            let (paired, report) =
                load_paired_directory(&root, &config.data_modalities, size).map_err(runtime)?;
            if report.missing_skipped > 0 {
                eprintln!(
                    "warning: skipped {} scene(s) missing a counterpart file",
                    report.missing_skipped
                );
            }
            for (path, reason) in &report.undecodable {
                eprintln!("warning: undecodable image {}: {reason}", path.display());
            }
            let mut images: Vec<Vec<Array3<f32>>> = paired
                .scenes
                .into_iter()
                .map(|(_, imgs)| {
                    imgs.into_iter()
                        .map(|img| if channels == 1 { to_grayscale(&img) } else { img })
                        .collect()
                })
                .collect();
            if images.len() < 2 {
                return Err(validation(format!(
                    "directory dataset has {} scene(s); need at least 2 to split",
                    images.len()
                )));
            }
            // deterministic shuffle, then the same floor split as synth
            let mut order: Vec<usize> = (0..images.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.data_master_seed);
            for i in (1..order.len()).rev() {
                let j = rand::Rng::gen_range(&mut rng, 0..=i);
                order.swap(i, j);
            }
            let train_count =
                ((images.len() as f64 * config.data_split_fraction).floor() as usize)
                    .clamp(1, images.len() - 1);
            let mut train = Vec::with_capacity(train_count);
            let mut test = Vec::with_capacity(images.len() - train_count);
            for (rank, &idx) in order.iter().enumerate() {
                let img = std::mem::take(&mut images[idx]);
                if rank < train_count {
                    train.push(img);
                } else {
                    test.push(img);
                }
            }
            Ok(Dataset {
                train_images: train,
                test_images: test,
            })
        }
    }
}

/// Builds the codec: identity directly, or a tiny autoencoder restored from
/// the archive when present, otherwise trained on the given images and
/// frozen.
pub fn build_codec(
    config: &RunConfig,
    train_images: &[Vec<Array3<f32>>],
    archive: Option<&TensorArchive>,
) -> Result<Codec, AppError> {
    let shape = (
        config.codec_channels,
        config.codec_image_size,
        config.codec_image_size,
    );
    match config.codec_kind {
        CodecKind::IdentityPixel => Codec::identity(shape).map_err(validation),
        CodecKind::TinyAutoencoder => {
            if let Some(archive) = archive {
                if archive.contains("codec/enc.fc1.weight") {
                    return Codec::tiny_from_archive(archive, "codec", shape, config.codec_ae_hidden)
                        .map_err(runtime);
                }
            }
            let flat: Vec<Array3<f32>> = train_images.iter().flatten().cloned().collect();
            if flat.is_empty() {
                return Err(validation(
                    "tiny_autoencoder needs training images to fit the codec",
                ));
            }
            eprintln!(
                "pre-training tiny autoencoder on {} images ({} steps)",
                flat.len(),
                config.codec_ae_steps
            );
            let ae = TinyAutoencoder::train(
                &flat,
                shape,
                &AeTrainConfig {
                    steps: config.codec_ae_steps,
                    lr: config.codec_ae_lr,
                    kl_weight: config.codec_ae_kl_weight,
                    hidden: config.codec_ae_hidden,
                    seed: config.codec_ae_seed,
                    ..AeTrainConfig::default()
                },
            )
            .map_err(runtime)?;
            Ok(Codec::Tiny(ae))
        }
    }
}

/// Encodes every scene's images to latents with a per-scene derived rng
/// stream (the identity codec ignores it).
pub fn encode_dataset(
    codec: &Codec,
    images: &[Vec<Array3<f32>>],
    seed: u64,
) -> Result<Vec<Vec<Array3<f32>>>, AppError> {
    images
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            scene
                .iter()
                .map(|img| codec.encode(img, &mut rng).map_err(runtime))
                .collect()
        })
        .collect()
}

/// Everything a sampling-side command needs from a checkpoint.
pub struct LoadedModel {
    pub model: DenoiserModel<f32>,
    pub codec: Codec,
}

/// Restores the model (EMA weights unless `use_ema` is false) and codec from
/// a checkpoint, validating tensor shapes against the config.
pub fn load_model(
    checkpoint: &Path,
    config: &RunConfig,
    use_ema: bool,
) -> Result<LoadedModel, AppError> {
    let archive = TensorArchive::load(checkpoint).map_err(runtime)?;
    let fresh = DenoiserModel::<f32>::new(config.model_config(), config.model_init_seed)
        .map_err(validation)?;
    let schedule = config.schedule().map_err(validation)?;
    let state = TrainState::from_archive(&archive, fresh, schedule, config.train_config())
        .map_err(runtime)?;
    let model = if use_ema {
        state.ema_model()
    } else {
        state.model().clone()
    };
    let codec = build_codec(config, &[], Some(&archive))?;
    Ok(LoadedModel { model, codec })
}

pub fn create_out_dir(out: &Path) -> Result<(), AppError> {
    std::fs::create_dir_all(out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))
}

/// Every run echoes its effective config for exact reproduction.
pub fn write_effective_config(out: &Path, config: &RunConfig) -> Result<(), AppError> {
    std::fs::write(out.join("effective-config.txt"), config.to_text())
        .map_err(|e| runtime(format!("cannot write config echo: {e}")))
}

/// Loads an image file and adapts it to the configured shape.
pub fn load_input_image(path: &Path, config: &RunConfig) -> Result<Array3<f32>, AppError> {
    let rgb = multidiff_core::synthdata::load_image_png(path, config.codec_image_size)
        .map_err(validation)?;
    Ok(if config.codec_channels == 1 {
        to_grayscale(&rgb)
    } else {
        rgb
    })
}

/// Tiles images (same shape) into a rows x cols grid.
pub fn tile_grid(images: &[Array3<f32>], rows: usize, cols: usize) -> Array3<f32> {
    let (c, h, w) = images[0].dim();
    let mut out = Array3::<f32>::zeros((c, rows * h, cols * w));
    for (i, img) in images.iter().enumerate().take(rows * cols) {
        let (r, col) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ch, r * h + y, col * w + x]] = img[[ch, y, x]];
                }
            }
        }
    }
    out
}
