//! Training loop: masked noise-regression loss over independent per-modality
//! timesteps, adaptive-moment updates with global-norm clipping, EMA shadow
//! weights, cosine learning-rate decay and checkpointing.
//!
//! Each batch item draws its own per-modality timesteps (uniform over
//! `0..=T` — zero included so the model sees the clean-conditioning
//! configurations used at inference) and fresh noise. Modalities drawn at
//! `t = 0` are excluded from the loss; their target noise is undefined.
//! Per-item gradients are computed in parallel and reduced in a fixed order,
//! so training is bitwise reproducible for a given seed and thread-count
//! independent.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{DenoiserModel, ModelError};
use crate::checkpoint::{CheckpointError, TensorArchive};
use crate::schedule::{forward_diffuse, NoiseSchedule, ScheduleError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("step {step} outside the schedule range 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("batch item {item} is misaligned: {source}")]
    MisalignedBatch { item: usize, source: ModelError },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at step {step}; step aborted, state unchanged")]
    NonFiniteLoss { step: u64 },
    #[error("parameter structure mismatch: {0} vs {1} elements")]
    StructureMismatch(usize, usize),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("schedule error: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("incompatible checkpoint: {}", .0.join("; "))]
    IncompatibleCheckpoint(Vec<String>),
}

/// How per-modality training timesteps are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TimestepLaw {
    /// Independent uniform over `{0, ..., T}` per modality.
    #[default]
    IndependentUniform,
    /// With probability `clamp_prob`, clamp a random non-empty proper
    /// subset of modalities at exactly `t = 0` (the inference-time
    /// conditioning configuration) and draw the rest uniformly from
    /// `{1, ..., T}`; otherwise fall back to the independent uniform law.
    ///
    /// Short desk-scale runs need this: under the pure uniform law the
    /// configurations that teach conditional generation (one modality
    /// clean, another heavily noised) carry so little gradient mass that
    /// clean conditioning tokens end up hurting the noise prediction
    /// instead of helping it.
    MixedConditional { clamp_prob: f64 },
}

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub timestep_law: TimestepLaw,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            total_steps: 3000,
            base_lr: 1e-4,
            warmup_steps: 100,
            ema_decay: 0.9999,
            seed: 0,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            timestep_law: TimestepLaw::default(),
        }
    }
}

impl TrainConfig {
    /// The reference-scale run: effective batch 2048 for ~120k steps at
    /// lr 1e-4 with EMA decay 0.9999. Recorded as documentation; never
    /// exercised by tests (the per-device batch / accumulation split is
    /// unspecified and irrelevant at desk scale).
    pub fn paper_scale() -> Self {
        Self {
            batch_size: 2048,
            total_steps: 120_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if self.warmup_steps >= self.total_steps {
            return err(format!(
                "warmup_steps {} must be < total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) && self.ema_decay != 1.0 {
            return err(format!("ema_decay {} outside (0, 1)", self.ema_decay));
        }
        if self.base_lr <= 0.0 {
            return err(format!("base_lr {} must be positive", self.base_lr));
        }
        if let TimestepLaw::MixedConditional { clamp_prob } = self.timestep_law {
            if !(0.0..=1.0).contains(&clamp_prob) {
                return err(format!("clamp_prob {clamp_prob} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Per-step statistics, also the training-log line content.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Step index this update was applied at (0-based).
    pub step: u64,
    /// Per-element mean squared error over included modalities.
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Draws independent uniform timesteps over `{0, ..., t_max}`, one per
/// modality.
pub fn sample_training_timesteps<R: Rng + ?Sized>(
    num_modalities: usize,
    t_max: usize,
    rng: &mut R,
) -> Vec<usize> {
    (0..num_modalities)
        .map(|_| rng.gen_range(0..=t_max))
        .collect()
}

/// Draws per-modality timesteps under the configured law.
pub fn sample_timesteps_with_law<R: Rng + ?Sized>(
    num_modalities: usize,
    t_max: usize,
    law: TimestepLaw,
    rng: &mut R,
) -> Vec<usize> {
    match law {
        TimestepLaw::IndependentUniform => {
            sample_training_timesteps(num_modalities, t_max, rng)
        }
        TimestepLaw::MixedConditional { clamp_prob } => {
            if num_modalities < 2 || rng.gen::<f64>() >= clamp_prob || t_max == 0 {
                return sample_training_timesteps(num_modalities, t_max, rng);
            }
            let num_clamped = rng.gen_range(1..num_modalities);
            let mut ids: Vec<usize> = (0..num_modalities).collect();
            for i in (1..ids.len()).rev() {
                let j = rng.gen_range(0..=i);
                ids.swap(i, j);
            }
            let mut ts = vec![0usize; num_modalities];
            for &id in ids.iter().skip(num_clamped) {
                ts[id] = rng.gen_range(1..=t_max);
            }
            ts
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * params`, elementwise.
pub fn ema_update<F: Scalar>(params: &[F], ema: &mut [F], decay: f64) -> Result<(), TrainError> {
    if params.len() != ema.len() {
        return Err(TrainError::StructureMismatch(ema.len(), params.len()));
    }
    let d = F::from_f64(decay);
    let one_minus = F::from_f64(1.0 - decay);
    for (e, &p) in ema.iter_mut().zip(params.iter()) {
        *e = d * *e + one_minus * p;
    }
    Ok(())
}

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay to zero
/// at `total_steps`.
pub fn lr_at_step(step: u64, config: &TrainConfig) -> Result<f64, TrainError> {
    if step > config.total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: config.total_steps,
        });
    }
    if step < config.warmup_steps {
        return Ok(config.base_lr * step as f64 / config.warmup_steps as f64);
    }
    let progress =
        (step - config.warmup_steps) as f64 / (config.total_steps - config.warmup_steps) as f64;
    Ok(config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Model parameters, EMA shadow, optimizer moments, step counter and rng —
/// everything a training run needs to resume bitwise.
pub struct TrainState {
    model: DenoiserModel<f32>,
    schedule: NoiseSchedule,
    config: TrainConfig,
    ema: Vec<f32>,
    moment1: Vec<f32>,
    moment2: Vec<f32>,
    step: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(
        model: DenoiserModel<f32>,
        schedule: NoiseSchedule,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if model.config().max_timestep != schedule.num_steps() {
            return Err(TrainError::InvalidConfig(format!(
                "model max_timestep {} != schedule length {}",
                model.config().max_timestep,
                schedule.num_steps()
            )));
        }
        let n = model.param_count();
        let ema = model.params().to_vec();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            schedule,
            config,
            ema,
            moment1: vec![0.0; n],
            moment2: vec![0.0; n],
            step: 0,
            rng,
        })
    }

    pub fn model(&self) -> &DenoiserModel<f32> {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ema_params(&self) -> &[f32] {
        &self.ema
    }

    /// A copy of the model carrying the EMA shadow weights, the default
    /// weights for inference.
    pub fn ema_model(&self) -> DenoiserModel<f32> {
        let mut m = self.model.clone();
        m.set_params(self.ema.clone()).expect("same layout");
        m
    }

    /// One optimizer step over an aligned batch (`batch[item][modality]`).
    pub fn training_step(&mut self, batch: &[Vec<Array3<f32>>]) -> Result<StepStats, TrainError> {
        self.training_step_impl(batch, None)
    }

    /// Test hook: forces the drawn timesteps per item instead of sampling.
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn training_step_forced(
        &mut self,
        batch: &[Vec<Array3<f32>>],
        timesteps: &[Vec<usize>],
    ) -> Result<StepStats, TrainError> {
        self.training_step_impl(batch, Some(timesteps))
    }

    fn training_step_impl(
        &mut self,
        batch: &[Vec<Array3<f32>>],
        forced_timesteps: Option<&[Vec<usize>]>,
    ) -> Result<StepStats, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let m = self.model.config().num_modalities;
        let shape = self.model.config().latent_shape;
        for (item, latents) in batch.iter().enumerate() {
            if latents.len() != m {
                return Err(TrainError::MisalignedBatch {
                    item,
                    source: ModelError::ModalityCount {
                        expected: m,
                        got: latents.len(),
                    },
                });
            }
            for (i, z) in latents.iter().enumerate() {
                if z.dim() != shape {
                    return Err(TrainError::MisalignedBatch {
                        item,
                        source: ModelError::LatentShape {
                            modality: i,
                            expected: shape,
                            got: z.dim(),
                        },
                    });
                }
            }
        }
        let lr = lr_at_step(self.step, &self.config)?;
        let t_max = self.schedule.num_steps();
        let law = self.config.timestep_law;
        let dropout = self.model.config().dropout_rate > 0.0;

        // rng state is only committed once the step is accepted
        let mut rng = self.rng.clone();
        let item_seeds: Vec<u64> = (0..batch.len()).map(|_| rng.gen()).collect();

        let model = &self.model;
        let schedule = &self.schedule;
        let results: Vec<Result<(f32, usize, Vec<f32>), TrainError>> =
            crate::par::map_range(batch.len(), |item| {
                let mut item_rng = ChaCha8Rng::seed_from_u64(item_seeds[item]);
                let timesteps = match forced_timesteps {
                    Some(ts) => ts[item].clone(),
                    None => sample_timesteps_with_law(m, t_max, law, &mut item_rng),
                };
                let mut noised = Vec::with_capacity(m);
                let mut targets: Vec<Option<Array3<f32>>> = Vec::with_capacity(m);
                for (i, x0) in batch[item].iter().enumerate() {
                    let eps = Array3::from_shape_fn(shape, |_| f32::std_normal(&mut item_rng));
                    noised.push(forward_diffuse(x0, timesteps[i], &eps, schedule)?);
                    targets.push(if timesteps[i] > 0 { Some(eps) } else { None });
                }
                let dropout_rng = dropout.then_some(&mut item_rng);
                let lg = model.loss_and_grad(&noised, &timesteps, &targets, dropout_rng)?;
                Ok((lg.sum_sq, lg.num_elements, lg.grad))
            });

        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        let mut grad = vec![0.0f32; self.model.param_count()];
        let mut item_grads = Vec::with_capacity(results.len());
        for r in results {
            let (s, c, g) = r?;
            sum_sq += s as f64;
            count += c;
            item_grads.push((c, g));
        }
        if count == 0 {
            // every modality of every item drew t = 0: nothing to regress
            self.rng = rng;
            self.step += 1;
            return Ok(StepStats {
                step: self.step - 1,
                loss: 0.0,
                lr,
                grad_norm: 0.0,
            });
        }
        // batch gradient of sum_sq_total / count_total; item grads are
        // normalised per item, so reweight by item_count / total_count.
        for (c, g) in &item_grads {
            let w = *c as f32 / count as f32;
            for (acc, &v) in grad.iter_mut().zip(g.iter()) {
                *acc += w * v;
            }
        }
        let loss = sum_sq / count as f64;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss { step: self.step });
        }

        let grad_norm = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            let scale = (self.config.grad_clip / grad_norm) as f32;
            for g in grad.iter_mut() {
                *g *= scale;
            }
        }

        // adaptive moments with bias correction
        let b1 = self.config.adam_beta1;
        let b2 = self.config.adam_beta2;
        let t = (self.step + 1) as i32;
        let corr1 = 1.0 - b1.powi(t);
        let corr2 = 1.0 - b2.powi(t);
        let eps = self.config.adam_eps;
        let params = self.model.params_mut();
        for i in 0..params.len() {
            let g = grad[i] as f64;
            let m1 = b1 * self.moment1[i] as f64 + (1.0 - b1) * g;
            let m2 = b2 * self.moment2[i] as f64 + (1.0 - b2) * g * g;
            self.moment1[i] = m1 as f32;
            self.moment2[i] = m2 as f32;
            let update = lr * (m1 / corr1) / ((m2 / corr2).sqrt() + eps);
            params[i] -= update as f32;
        }
        ema_update(self.model.params(), &mut self.ema, self.config.ema_decay)?;
        self.rng = rng;
        self.step += 1;
        Ok(StepStats {
            step: self.step - 1,
            loss,
            lr,
            grad_norm,
        })
    }

    /// Serialises parameters, EMA shadow, optimizer moments, step counter
    /// and rng state into a tensor archive (namespaces `param/`, `ema/`,
    /// `opt_m/`, `opt_v/`, `meta/`).
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        let layout = self.model.layout();
        for e in layout.entries() {
            let range = e.offset..e.offset + e.len;
            a.put_f32(&format!("param/{}", e.name), &e.shape, &self.model.params()[range.clone()])
                .expect("unique names");
            a.put_f32(&format!("ema/{}", e.name), &e.shape, &self.ema[range.clone()])
                .expect("unique names");
            a.put_f32(&format!("opt_m/{}", e.name), &e.shape, &self.moment1[range.clone()])
                .expect("unique names");
            a.put_f32(&format!("opt_v/{}", e.name), &e.shape, &self.moment2[range])
                .expect("unique names");
        }
        a.put_u64("meta/step", &[self.step]).expect("unique names");
        let mut rng_state = Vec::with_capacity(56);
        rng_state.extend_from_slice(&self.rng.get_seed());
        rng_state.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        rng_state.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        a.put_u8("meta/rng", &rng_state).expect("unique names");
        a
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        self.to_archive().save(path)
    }

    /// Restores a training state from an archive. `model` supplies the
    /// architecture; every tensor is checked against its layout shape and
    /// all mismatches are reported together.
    pub fn from_archive(
        archive: &TensorArchive,
        mut model: DenoiserModel<f32>,
        schedule: NoiseSchedule,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let layout = model.layout().clone();
        let total = layout.total_len();
        let mut params = vec![0.0f32; total];
        let mut ema = vec![0.0f32; total];
        let mut moment1 = vec![0.0f32; total];
        let mut moment2 = vec![0.0f32; total];
        let mut mismatches = Vec::new();
        {
            let mut fill = |prefix: &str, dest: &mut [f32]| {
                for e in layout.entries() {
                    let key = format!("{prefix}/{}", e.name);
                    match archive.get_f32(&key) {
                        Ok((shape, vals)) => {
                            if shape != e.shape {
                                mismatches.push(format!(
                                    "{key}: checkpoint shape {shape:?}, model expects {:?}",
                                    e.shape
                                ));
                            } else {
                                dest[e.offset..e.offset + e.len].copy_from_slice(&vals);
                            }
                        }
                        Err(_) => mismatches.push(format!("{key}: missing")),
                    }
                }
            };
            fill("param", &mut params);
            fill("ema", &mut ema);
            fill("opt_m", &mut moment1);
            fill("opt_v", &mut moment2);
        }
        if !mismatches.is_empty() {
            return Err(TrainError::IncompatibleCheckpoint(mismatches));
        }
        let step = archive.get_u64("meta/step")?[0];
        let rng_state = archive.get_u8("meta/rng")?;
        if rng_state.len() != 56 {
            return Err(TrainError::IncompatibleCheckpoint(vec![format!(
                "meta/rng: expected 56 bytes, got {}",
                rng_state.len()
            )]));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&rng_state[0..32]);
        let word_pos = u128::from_le_bytes(rng_state[32..48].try_into().unwrap());
        let stream = u64::from_le_bytes(rng_state[48..56].try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        model.set_params(params)?;
        Ok(Self {
            model,
            schedule,
            config,
            ema,
            moment1,
            moment2,
            step,
            rng,
        })
    }

    pub fn load_checkpoint(
        path: &std::path::Path,
        model: DenoiserModel<f32>,
        schedule: NoiseSchedule,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        let archive = TensorArchive::load(path)?;
        Self::from_archive(&archive, model, schedule, config)
    }
}
