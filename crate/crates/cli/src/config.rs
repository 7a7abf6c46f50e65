//! Run configuration: a line-oriented `section.key = value` text format
//! with documented defaults for every field, strict unknown-key rejection,
//! and an echo form that reparses to the same effective config.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use multidiff_core::backbone::ModelConfig;
use multidiff_core::codec::{CodecKind, CodecSpec};
use multidiff_core::sampler::Solver;
use multidiff_core::schedule::{NoiseSchedule, ReverseVariance, ScheduleError};
use multidiff_core::trainer::{TimestepLaw, TrainConfig};

#[derive(Debug)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(line) => write!(f, "config line {line}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: Option<usize>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth,
    Directory,
}

/// The fully-validated effective configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub model_num_modalities: usize,
    pub model_patch_size: usize,
    pub model_embed_dim: usize,
    pub model_depth: usize,
    pub model_num_heads: usize,
    pub model_mlp_ratio: f64,
    pub model_dropout: f64,
    pub model_init_seed: u64,
    // schedule
    pub schedule_num_steps: usize,
    pub schedule_beta_min: f64,
    pub schedule_beta_max: f64,
    pub schedule_reverse_variance: ReverseVariance,
    // codec
    pub codec_kind: CodecKind,
    pub codec_image_size: usize,
    pub codec_channels: usize,
    pub codec_ae_hidden: usize,
    pub codec_ae_steps: usize,
    pub codec_ae_kl_weight: f64,
    pub codec_ae_lr: f64,
    pub codec_ae_seed: u64,
    // data
    pub data_source: DataSource,
    pub data_root: String,
    pub data_modalities: Vec<String>,
    pub data_num_scenes: usize,
    pub data_split_fraction: f64,
    pub data_master_seed: u64,
    // train
    pub train_batch_size: usize,
    pub train_total_steps: u64,
    pub train_base_lr: f64,
    pub train_warmup_steps: u64,
    pub train_ema_decay: f64,
    pub train_seed: u64,
    pub train_grad_clip: f64,
    pub train_timestep_law: String,
    pub train_clamp_prob: f64,
    pub train_log_every: u64,
    pub train_checkpoint_every: u64,
    // sample
    pub sample_num_steps: usize,
    pub sample_solver: Solver,
    pub sample_seed: u64,
    pub sample_count: usize,
    pub sample_use_ema: bool,
    // eval
    pub eval_extractor: String,
    pub eval_k: usize,
    pub eval_num_samples: usize,
    pub eval_rp_seed: u64,
    pub eval_rp_dim: usize,
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_num_modalities: 4,
            model_patch_size: 2,
            model_embed_dim: 128,
            model_depth: 8,
            model_num_heads: 4,
            model_mlp_ratio: 4.0,
            model_dropout: 0.0,
            model_init_seed: 0,
            schedule_num_steps: 1000,
            schedule_beta_min: 1e-4,
            schedule_beta_max: 0.02,
            schedule_reverse_variance: ReverseVariance::Beta,
            codec_kind: CodecKind::IdentityPixel,
            codec_image_size: 16,
            codec_channels: 1,
            codec_ae_hidden: 64,
            codec_ae_steps: 3000,
            codec_ae_kl_weight: 1e-4,
            codec_ae_lr: 2e-3,
            codec_ae_seed: 0,
            data_source: DataSource::Synth,
            data_root: String::new(),
            data_modalities: vec![
                "dem_hillshade".into(),
                "optical".into(),
                "radar_like".into(),
                "optical_hazy".into(),
            ],
            data_num_scenes: 2048,
            data_split_fraction: 0.95,
            data_master_seed: 0,
            train_batch_size: 16,
            train_total_steps: 3000,
            train_base_lr: 1e-4,
            train_warmup_steps: 100,
            train_ema_decay: 0.9999,
            train_seed: 0,
            train_grad_clip: 1.0,
            train_timestep_law: "uniform".into(),
            train_clamp_prob: 0.5,
            train_log_every: 50,
            train_checkpoint_every: 1000,
            sample_num_steps: 50,
            sample_solver: Solver::DpmSolverPp2m,
            sample_seed: 0,
            sample_count: 16,
            sample_use_ema: true,
            eval_extractor: "patch_stats".into(),
            eval_k: 3,
            eval_num_samples: 512,
            eval_rp_seed: 0,
            eval_rp_dim: 64,
            eval_seed: 1000,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| err(Some(line), format!("{key}: cannot parse '{value}': {e}")))
}

impl RunConfig {
    /// Parses a config file; every key is optional and unknown keys are
    /// rejected with their line number. The result is fully validated.
    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(None, format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(Some(line_no), format!("expected 'key = value', got '{line}'")));
            };
            let key = key.trim();
            let value = value.trim();
            config.assign(line_no, key, value)?;
            seen.insert(key.to_string());
        }
        config.validate()?;
        Ok(config)
    }

    fn assign(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "model.num_modalities" => self.model_num_modalities = parse_value(line, key, value)?,
            "model.patch_size" => self.model_patch_size = parse_value(line, key, value)?,
            "model.embed_dim" => self.model_embed_dim = parse_value(line, key, value)?,
            "model.depth" => self.model_depth = parse_value(line, key, value)?,
            "model.num_heads" => self.model_num_heads = parse_value(line, key, value)?,
            "model.mlp_ratio" => self.model_mlp_ratio = parse_value(line, key, value)?,
            "model.dropout" => self.model_dropout = parse_value(line, key, value)?,
            "model.init_seed" => self.model_init_seed = parse_value(line, key, value)?,
            "model.preset" => match value {
                "desk" => {
                    let d = ModelConfig::desk_default();
                    self.model_embed_dim = d.embed_dim;
                    self.model_depth = d.depth;
                    self.model_num_heads = d.num_heads;
                    self.model_patch_size = d.patch_size;
                }
                "paper" => {
                    let p = ModelConfig::paper_scale();
                    self.model_embed_dim = p.embed_dim;
                    self.model_depth = p.depth;
                    self.model_num_heads = p.num_heads;
                    self.model_patch_size = p.patch_size;
                }
                other => {
                    return Err(err(
                        Some(line),
                        format!("model.preset must be 'desk' or 'paper', got '{other}'"),
                    ))
                }
            },
            "schedule.num_steps" => self.schedule_num_steps = parse_value(line, key, value)?,
            "schedule.beta_min" => self.schedule_beta_min = parse_value(line, key, value)?,
            "schedule.beta_max" => self.schedule_beta_max = parse_value(line, key, value)?,
            "schedule.reverse_variance" => {
                self.schedule_reverse_variance = match value {
                    "beta" => ReverseVariance::Beta,
                    "posterior" => ReverseVariance::PosteriorBeta,
                    other => {
                        return Err(err(
                            Some(line),
                            format!("schedule.reverse_variance must be 'beta' or 'posterior', got '{other}'"),
                        ))
                    }
                }
            }
            "codec.kind" => {
                self.codec_kind = match value {
                    "identity_pixel" => CodecKind::IdentityPixel,
                    "tiny_autoencoder" => CodecKind::TinyAutoencoder,
                    other => {
                        return Err(err(
                            Some(line),
                            format!("codec.kind must be 'identity_pixel' or 'tiny_autoencoder', got '{other}'"),
                        ))
                    }
                }
            }
            "codec.image_size" => self.codec_image_size = parse_value(line, key, value)?,
            "codec.channels" => self.codec_channels = parse_value(line, key, value)?,
            "codec.ae_hidden" => self.codec_ae_hidden = parse_value(line, key, value)?,
            "codec.ae_steps" => self.codec_ae_steps = parse_value(line, key, value)?,
            "codec.ae_kl_weight" => self.codec_ae_kl_weight = parse_value(line, key, value)?,
            "codec.ae_lr" => self.codec_ae_lr = parse_value(line, key, value)?,
            "codec.ae_seed" => self.codec_ae_seed = parse_value(line, key, value)?,
            "data.source" => {
                self.data_source = match value {
                    "synth" => DataSource::Synth,
                    "directory" => DataSource::Directory,
                    other => {
                        return Err(err(
                            Some(line),
                            format!("data.source must be 'synth' or 'directory', got '{other}'"),
                        ))
                    }
                }
            }
            "data.root" => self.data_root = value.to_string(),
            "data.modalities" => {
                self.data_modalities = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if self.data_modalities.is_empty() {
                    return Err(err(Some(line), "data.modalities must list at least one name"));
                }
            }
            "data.num_scenes" => self.data_num_scenes = parse_value(line, key, value)?,
            "data.split_fraction" => self.data_split_fraction = parse_value(line, key, value)?,
            "data.master_seed" => self.data_master_seed = parse_value(line, key, value)?,
            "train.batch_size" => self.train_batch_size = parse_value(line, key, value)?,
            "train.total_steps" => self.train_total_steps = parse_value(line, key, value)?,
            "train.base_lr" => self.train_base_lr = parse_value(line, key, value)?,
            "train.warmup_steps" => self.train_warmup_steps = parse_value(line, key, value)?,
            "train.ema_decay" => self.train_ema_decay = parse_value(line, key, value)?,
            "train.seed" => self.train_seed = parse_value(line, key, value)?,
            "train.grad_clip" => self.train_grad_clip = parse_value(line, key, value)?,
            "train.timestep_law" => match value {
                "uniform" | "mixed" => self.train_timestep_law = value.to_string(),
                other => {
                    return Err(err(
                        Some(line),
                        format!("train.timestep_law must be 'uniform' or 'mixed', got '{other}'"),
                    ))
                }
            },
            "train.clamp_prob" => self.train_clamp_prob = parse_value(line, key, value)?,
            "train.log_every" => self.train_log_every = parse_value(line, key, value)?,
            "train.checkpoint_every" => {
                self.train_checkpoint_every = parse_value(line, key, value)?
            }
            "sample.num_steps" => self.sample_num_steps = parse_value(line, key, value)?,
            "sample.solver" => self.sample_solver = parse_solver(value).map_err(|m| err(Some(line), m))?,
            "sample.seed" => self.sample_seed = parse_value(line, key, value)?,
            "sample.count" => self.sample_count = parse_value(line, key, value)?,
            "sample.use_ema" => self.sample_use_ema = parse_value(line, key, value)?,
            "eval.extractor" => {
                match value {
                    "patch_stats" | "flatten_pixels" | "random_projection" => {
                        self.eval_extractor = value.to_string()
                    }
                    other => {
                        return Err(err(
                            Some(line),
                            format!("eval.extractor must be one of patch_stats, flatten_pixels, random_projection; got '{other}'"),
                        ))
                    }
                }
            }
            "eval.k" => self.eval_k = parse_value(line, key, value)?,
            "eval.num_samples" => self.eval_num_samples = parse_value(line, key, value)?,
            "eval.rp_seed" => self.eval_rp_seed = parse_value(line, key, value)?,
            "eval.rp_dim" => self.eval_rp_dim = parse_value(line, key, value)?,
            "eval.seed" => self.eval_seed = parse_value(line, key, value)?,
            other => return Err(err(Some(line), format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model_num_modalities != self.data_modalities.len() {
            return Err(err(
                None,
                format!(
                    "model.num_modalities = {} but data.modalities lists {} entries ({})",
                    self.model_num_modalities,
                    self.data_modalities.len(),
                    self.data_modalities.join(",")
                ),
            ));
        }
        if self.codec_channels != 1 && self.codec_channels != 3 {
            return Err(err(
                None,
                format!("codec.channels must be 1 or 3, got {}", self.codec_channels),
            ));
        }
        self.codec_spec()
            .validate()
            .map_err(|e| err(None, format!("codec: {e}")))?;
        self.model_config()
            .validate()
            .map_err(|e| err(None, format!("model: {e}")))?;
        self.schedule()
            .map_err(|e| err(None, format!("schedule: {e}")))?;
        self.train_config()
            .validate()
            .map_err(|e| err(None, format!("train: {e}")))?;
        if self.data_source == DataSource::Directory && self.data_root.is_empty() {
            return Err(err(None, "data.source = directory requires data.root"));
        }
        if self.sample_num_steps == 0 {
            return Err(err(None, "sample.num_steps must be >= 1"));
        }
        if self.eval_k == 0 {
            return Err(err(None, "eval.k must be >= 1"));
        }
        Ok(())
    }

    pub fn codec_spec(&self) -> CodecSpec {
        let shape = (
            self.codec_channels,
            self.codec_image_size,
            self.codec_image_size,
        );
        match self.codec_kind {
            CodecKind::IdentityPixel => CodecSpec::identity(shape),
            CodecKind::TinyAutoencoder => CodecSpec::tiny_autoencoder(shape),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_modalities: self.model_num_modalities,
            latent_shape: self.codec_spec().latent_shape(),
            patch_size: self.model_patch_size,
            embed_dim: self.model_embed_dim,
            depth: self.model_depth,
            num_heads: self.model_num_heads,
            mlp_ratio: self.model_mlp_ratio,
            dropout_rate: self.model_dropout,
            dropout_overrides: None,
            max_timestep: self.schedule_num_steps,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, ScheduleError> {
        NoiseSchedule::linear(
            self.schedule_num_steps,
            self.schedule_beta_min,
            self.schedule_beta_max,
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train_batch_size,
            total_steps: self.train_total_steps,
            base_lr: self.train_base_lr,
            warmup_steps: self.train_warmup_steps,
            ema_decay: self.train_ema_decay,
            seed: self.train_seed,
            grad_clip: self.train_grad_clip,
            timestep_law: if self.train_timestep_law == "mixed" {
                TimestepLaw::MixedConditional {
                    clamp_prob: self.train_clamp_prob,
                }
            } else {
                TimestepLaw::IndependentUniform
            },
            ..TrainConfig::default()
        }
    }

    /// The effective config as parseable text; reparsing reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let solver = match self.sample_solver {
            Solver::Ancestral => "ancestral",
            Solver::DpmSolverPp2m => "dpmpp",
        };
        let variance = match self.schedule_reverse_variance {
            ReverseVariance::Beta => "beta",
            ReverseVariance::PosteriorBeta => "posterior",
        };
        let kind = match self.codec_kind {
            CodecKind::IdentityPixel => "identity_pixel",
            CodecKind::TinyAutoencoder => "tiny_autoencoder",
        };
        let source = match self.data_source {
            DataSource::Synth => "synth",
            DataSource::Directory => "directory",
        };
        let _ = writeln!(s, "model.num_modalities = {}", self.model_num_modalities);
        let _ = writeln!(s, "model.patch_size = {}", self.model_patch_size);
        let _ = writeln!(s, "model.embed_dim = {}", self.model_embed_dim);
        let _ = writeln!(s, "model.depth = {}", self.model_depth);
        let _ = writeln!(s, "model.num_heads = {}", self.model_num_heads);
        let _ = writeln!(s, "model.mlp_ratio = {}", self.model_mlp_ratio);
        let _ = writeln!(s, "model.dropout = {}", self.model_dropout);
        let _ = writeln!(s, "model.init_seed = {}", self.model_init_seed);
        let _ = writeln!(s, "schedule.num_steps = {}", self.schedule_num_steps);
        let _ = writeln!(s, "schedule.beta_min = {}", self.schedule_beta_min);
        let _ = writeln!(s, "schedule.beta_max = {}", self.schedule_beta_max);
        let _ = writeln!(s, "schedule.reverse_variance = {variance}");
        let _ = writeln!(s, "codec.kind = {kind}");
        let _ = writeln!(s, "codec.image_size = {}", self.codec_image_size);
        let _ = writeln!(s, "codec.channels = {}", self.codec_channels);
        let _ = writeln!(s, "codec.ae_hidden = {}", self.codec_ae_hidden);
        let _ = writeln!(s, "codec.ae_steps = {}", self.codec_ae_steps);
        let _ = writeln!(s, "codec.ae_kl_weight = {}", self.codec_ae_kl_weight);
        let _ = writeln!(s, "codec.ae_lr = {}", self.codec_ae_lr);
        let _ = writeln!(s, "codec.ae_seed = {}", self.codec_ae_seed);
        let _ = writeln!(s, "data.source = {source}");
        if !self.data_root.is_empty() {
            let _ = writeln!(s, "data.root = {}", self.data_root);
        }
        let _ = writeln!(s, "data.modalities = {}", self.data_modalities.join(","));
        let _ = writeln!(s, "data.num_scenes = {}", self.data_num_scenes);
        let _ = writeln!(s, "data.split_fraction = {}", self.data_split_fraction);
        let _ = writeln!(s, "data.master_seed = {}", self.data_master_seed);
        let _ = writeln!(s, "train.batch_size = {}", self.train_batch_size);
        let _ = writeln!(s, "train.total_steps = {}", self.train_total_steps);
        let _ = writeln!(s, "train.base_lr = {}", self.train_base_lr);
        let _ = writeln!(s, "train.warmup_steps = {}", self.train_warmup_steps);
        let _ = writeln!(s, "train.ema_decay = {}", self.train_ema_decay);
        let _ = writeln!(s, "train.seed = {}", self.train_seed);
        let _ = writeln!(s, "train.grad_clip = {}", self.train_grad_clip);
        let _ = writeln!(s, "train.timestep_law = {}", self.train_timestep_law);
        let _ = writeln!(s, "train.clamp_prob = {}", self.train_clamp_prob);
        let _ = writeln!(s, "train.log_every = {}", self.train_log_every);
        let _ = writeln!(s, "train.checkpoint_every = {}", self.train_checkpoint_every);
        let _ = writeln!(s, "sample.num_steps = {}", self.sample_num_steps);
        let _ = writeln!(s, "sample.solver = {solver}");
        let _ = writeln!(s, "sample.seed = {}", self.sample_seed);
        let _ = writeln!(s, "sample.count = {}", self.sample_count);
        let _ = writeln!(s, "sample.use_ema = {}", self.sample_use_ema);
        let _ = writeln!(s, "eval.extractor = {}", self.eval_extractor);
        let _ = writeln!(s, "eval.k = {}", self.eval_k);
        let _ = writeln!(s, "eval.num_samples = {}", self.eval_num_samples);
        let _ = writeln!(s, "eval.rp_seed = {}", self.eval_rp_seed);
        let _ = writeln!(s, "eval.rp_dim = {}", self.eval_rp_dim);
        let _ = writeln!(s, "eval.seed = {}", self.eval_seed);
        s
    }

    /// FNV-1a hash of the effective config text, hex-encoded.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

pub fn parse_solver(value: &str) -> Result<Solver, String> {
    match value {
        "ancestral" => Ok(Solver::Ancestral),
        "dpmpp" => Ok(Solver::DpmSolverPp2m),
        other => Err(format!("solver must be 'ancestral' or 'dpmpp', got '{other}'")),
    }
}
