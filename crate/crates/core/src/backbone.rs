//! Skip-connected transformer denoiser over multi-modal token sequences.
//!
//! Every modality is patch-embedded by its own linear map and prefixed with
//! one time token produced by its own sinusoid-plus-MLP embedder. The whole
//! sequence `[e_1..e_M, h_1..h_M]` runs through `depth` pre-norm transformer
//! blocks; the first half push their outputs onto a skip stack and the
//! second half consume it through linear `2d -> d` projections, pairing
//! in-block `k` with out-block `depth - 1 - k`. Per-modality output heads
//! (layer norm plus linear) map tokens back to patches, which are
//! reassembled into one noise prediction per modality.
//!
//! Parameters live in one flat named tensor collection so the optimizer,
//! EMA, checkpointing and the finite-difference checks can treat the model
//! as a single vector.

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn;
use crate::Scalar;

const TIME_EMBED_BASE: f64 = 10_000.0;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} modalities, got {got}")]
    ModalityCount { expected: usize, got: usize },
    #[error("latent shape mismatch for modality {modality}: expected {expected:?}, got {got:?}")]
    LatentShape {
        modality: usize,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("timestep {t} for modality {modality} exceeds schedule length {max}")]
    TimestepRange { modality: usize, t: usize, max: usize },
    #[error("token count mismatch: expected {expected}, got {got}")]
    TokenCount { expected: usize, got: usize },
    #[error("parameter vector length {got} does not match layout {expected}")]
    ParamLength { expected: usize, got: usize },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_modalities: usize,
    /// `(channels, height, width)` of every modality's latent.
    pub latent_shape: (usize, usize, usize),
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Total transformer blocks; the first half feed skips to the second.
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Token dropout rate applied independently per modality during training.
    pub dropout_rate: f64,
    /// Per-modality dropout overrides (length `num_modalities`); `None`
    /// applies `dropout_rate` to every modality.
    pub dropout_overrides: Option<Vec<f64>>,
    /// Highest diffusion timestep the model accepts (schedule length `T`).
    pub max_timestep: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: four modalities of single-channel 16x16 latents.
    pub fn desk_default() -> Self {
        Self {
            num_modalities: 4,
            latent_shape: (1, 16, 16),
            patch_size: 2,
            embed_dim: 128,
            depth: 8,
            num_heads: 4,
            mlp_ratio: 4.0,
            dropout_rate: 0.0,
            dropout_overrides: None,
            max_timestep: 1000,
        }
    }

    /// The reference-scale preset: embed dim 512, 6 in-blocks + 6 out-blocks,
    /// patch size 2 over 4x32x32 latents. Kept as documentation; never
    /// exercised by tests.
    pub fn paper_scale() -> Self {
        Self {
            num_modalities: 4,
            latent_shape: (4, 32, 32),
            patch_size: 2,
            embed_dim: 512,
            depth: 12,
            num_heads: 8,
            mlp_ratio: 4.0,
            dropout_rate: 0.0,
            dropout_overrides: None,
            max_timestep: 1000,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (c, h, w) = self.latent_shape;
        let err = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_modalities == 0 {
            return err("num_modalities must be >= 1".into());
        }
        if c == 0 || h == 0 || w == 0 {
            return err(format!("degenerate latent shape {:?}", self.latent_shape));
        }
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return err(format!(
                "latent {h}x{w} not divisible by patch size {}",
                self.patch_size
            ));
        }
        if self.depth < 2 || self.depth % 2 != 0 {
            return err(format!("depth must be even and >= 2, got {}", self.depth));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim % 2 != 0 {
            return err("embed dim must be even for the sinusoidal time encoding".into());
        }
        if self.mlp_ratio <= 0.0 {
            return err(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if let Some(rates) = &self.dropout_overrides {
            if rates.len() != self.num_modalities {
                return err(format!(
                    "dropout_overrides has {} entries for {} modalities",
                    rates.len(),
                    self.num_modalities
                ));
            }
            if let Some(bad) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
                return err(format!("dropout override {bad} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Tokens per modality: `(H/p) * (W/p)`.
    pub fn tokens_per_modality(&self) -> usize {
        let (_, h, w) = self.latent_shape;
        (h / self.patch_size) * (w / self.patch_size)
    }

    /// Full sequence length: `M` time tokens plus `M * N` patch tokens.
    pub fn seq_len(&self) -> usize {
        self.num_modalities * (1 + self.tokens_per_modality())
    }

    /// Values per patch token: `p * p * C`.
    pub fn patch_dim(&self) -> usize {
        let (c, _, _) = self.latent_shape;
        self.patch_size * self.patch_size * c
    }

    pub fn mlp_hidden_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Names, shapes and offsets of every parameter tensor; a deterministic
/// function of the config.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub(crate) fn new() -> Self {
        Self {
            entries: Vec::new(),
            total: 0,
        }
    }

    pub(crate) fn push(&mut self, name: String, shape: &[usize]) -> usize {
        let len: usize = shape.iter().product();
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            offset: self.total,
            len,
        });
        self.total += len;
        id
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    norm1: NormIds,
    qkv: LinearIds,
    proj: LinearIds,
    norm2: NormIds,
    fc1: LinearIds,
    fc2: LinearIds,
}

#[derive(Debug, Clone)]
struct Wiring {
    patch_embed: Vec<LinearIds>,
    time_fc1: Vec<LinearIds>,
    time_fc2: Vec<LinearIds>,
    pos_embed: usize,
    blocks: Vec<BlockIds>,
    skips: Vec<LinearIds>,
    head_norm: Vec<NormIds>,
    head_out: Vec<LinearIds>,
}

fn build_layout(config: &ModelConfig) -> (ParamLayout, Wiring) {
    let d = config.embed_dim;
    let p_dim = config.patch_dim();
    let hidden = config.mlp_hidden_dim();
    let mut layout = ParamLayout::new();
    fn linear(layout: &mut ParamLayout, name: &str, rows: usize, cols: usize) -> LinearIds {
        LinearIds {
            w: layout.push(format!("{name}.weight"), &[rows, cols]),
            b: layout.push(format!("{name}.bias"), &[cols]),
        }
    }
    fn norm(layout: &mut ParamLayout, name: &str, d: usize) -> NormIds {
        NormIds {
            gain: layout.push(format!("{name}.gain"), &[d]),
            bias: layout.push(format!("{name}.bias"), &[d]),
        }
    }

    let patch_embed = (0..config.num_modalities)
        .map(|i| linear(&mut layout, &format!("patch_embed.{i}"), p_dim, d))
        .collect();
    let time_fc1 = (0..config.num_modalities)
        .map(|i| linear(&mut layout, &format!("time_embed.{i}.fc1"), d, d))
        .collect();
    let time_fc2 = (0..config.num_modalities)
        .map(|i| linear(&mut layout, &format!("time_embed.{i}.fc2"), d, d))
        .collect();
    let pos_embed = layout.push("pos_embed".into(), &[config.seq_len(), d]);
    let blocks = (0..config.depth)
        .map(|k| BlockIds {
            norm1: norm(&mut layout, &format!("blocks.{k}.norm1"), d),
            qkv: linear(&mut layout, &format!("blocks.{k}.attn.qkv"), d, 3 * d),
            proj: linear(&mut layout, &format!("blocks.{k}.attn.proj"), d, d),
            norm2: norm(&mut layout, &format!("blocks.{k}.norm2"), d),
            fc1: linear(&mut layout, &format!("blocks.{k}.mlp.fc1"), d, hidden),
            fc2: linear(&mut layout, &format!("blocks.{k}.mlp.fc2"), hidden, d),
        })
        .collect();
    let skips = (0..config.depth / 2)
        .map(|j| linear(&mut layout, &format!("skip.{j}"), 2 * d, d))
        .collect();
    let head_norm = (0..config.num_modalities)
        .map(|i| norm(&mut layout, &format!("head.{i}.norm"), d))
        .collect();
    let head_out = (0..config.num_modalities)
        .map(|i| linear(&mut layout, &format!("head.{i}.out"), d, p_dim))
        .collect();

    (
        layout,
        Wiring {
            patch_embed,
            time_fc1,
            time_fc2,
            pos_embed,
            blocks,
            skips,
            head_norm,
            head_out,
        },
    )
}

/// Splits a latent `(C, H, W)` into non-overlapping `p x p` patches, one
/// token per patch in row-major grid order (top-left first). Within a token
/// the values are channel-major: index `c*p*p + py*p + px`.
pub fn patchify<F: Scalar>(z: &Array3<F>, patch: usize) -> Result<Array2<F>, ModelError> {
    let (c, h, w) = z.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(ModelError::InvalidConfig(format!(
            "latent {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::<F>::zeros((gh * gw, patch * patch * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let token = gy * gw + gx;
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        out[[token, ch * patch * patch + py * patch + px]] =
                            z[[ch, gy * patch + py, gx * patch + px]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify`]'s spatial arrangement.
pub fn unpatchify<F: Scalar>(
    tokens: &ArrayView2<F>,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Array3<F>, ModelError> {
    let (gh, gw) = (height / patch, width / patch);
    let expected = gh * gw;
    if tokens.nrows() != expected {
        return Err(ModelError::TokenCount {
            expected,
            got: tokens.nrows(),
        });
    }
    if tokens.ncols() != patch * patch * channels {
        return Err(ModelError::TokenCount {
            expected: patch * patch * channels,
            got: tokens.ncols(),
        });
    }
    let mut out = Array3::<F>::zeros((channels, height, width));
    for gy in 0..gh {
        for gx in 0..gw {
            let token = gy * gw + gx;
            for ch in 0..channels {
                for py in 0..patch {
                    for px in 0..patch {
                        out[[ch, gy * patch + py, gx * patch + px]] =
                            tokens[[token, ch * patch * patch + py * patch + px]];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) struct BlockCache<F> {
    xhat1: Array2<F>,
    rstd1: Array1<F>,
    ln1_out: Array2<F>,
    attn: nn::AttnCache<F>,
    xhat2: Array2<F>,
    rstd2: Array1<F>,
    ln2_out: Array2<F>,
    fc1_pre: Array2<F>,
    act: Array2<F>,
}

pub(crate) struct EmbedCache<F> {
    patch_tokens: Vec<Array2<F>>,
    time_sin: Vec<Array1<F>>,
    time_pre: Vec<Array1<F>>,
    time_act: Vec<Array1<F>>,
    dropout_masks: Vec<Option<Array1<F>>>,
}

pub(crate) struct ForwardCache<F> {
    embed: EmbedCache<F>,
    blocks: Vec<BlockCache<F>>,
    skip_cat: Vec<Array2<F>>,
    head_xhat: Vec<Array2<F>>,
    head_rstd: Vec<Array1<F>>,
}

/// Loss value and flat gradient returned by [`DenoiserModel::loss_and_grad`].
pub struct LossGrad<F> {
    /// Sum of squared errors over every included element.
    pub sum_sq: F,
    /// Number of elements included in the loss.
    pub num_elements: usize,
    /// Gradient of `sum_sq / num_elements` with respect to the flat params.
    pub grad: Vec<F>,
}

/// The denoiser: config, parameter layout and one flat parameter vector.
#[derive(Debug, Clone)]
pub struct DenoiserModel<F> {
    config: ModelConfig,
    layout: ParamLayout,
    wiring: Wiring,
    params: Vec<F>,
}

impl<F: Scalar> DenoiserModel<F> {
    /// Builds the model and initialises parameters from `seed`: truncated
    /// normal (std 0.02) for weights and embeddings, zeros for biases, ones
    /// for norm gains, and zeros for the output heads so the initial noise
    /// prediction is exactly zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, wiring) = build_layout(&config);
        let mut params = vec![F::zero(); layout.total_len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for entry in layout.entries() {
            let slot = &mut params[entry.offset..entry.offset + entry.len];
            if entry.name.ends_with(".gain") {
                slot.fill(F::one());
            } else if entry.name.ends_with(".bias") || entry.name.starts_with("head.") {
                // stays zero
            } else {
                for v in slot.iter_mut() {
                    *v = nn::trunc_normal(&mut rng, INIT_STD);
                }
            }
        }
        Ok(Self {
            config,
            layout,
            wiring,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<F>) -> Result<(), ModelError> {
        if params.len() != self.layout.total_len() {
            return Err(ModelError::ParamLength {
                expected: self.layout.total_len(),
                got: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    fn w2(&self, id: usize) -> ArrayView2<'_, F> {
        let e = &self.layout.entries[id];
        ArrayView2::from_shape(
            (e.shape[0], e.shape[1]),
            &self.params[e.offset..e.offset + e.len],
        )
        .expect("layout shape consistent")
    }

    fn w1(&self, id: usize) -> ArrayView1<'_, F> {
        let e = &self.layout.entries[id];
        ArrayView1::from_shape(e.shape[0], &self.params[e.offset..e.offset + e.len])
            .expect("layout shape consistent")
    }

    fn validate_inputs(
        &self,
        latents: &[Array3<F>],
        timesteps: &[usize],
    ) -> Result<(), ModelError> {
        let m = self.config.num_modalities;
        if latents.len() != m {
            return Err(ModelError::ModalityCount {
                expected: m,
                got: latents.len(),
            });
        }
        if timesteps.len() != m {
            return Err(ModelError::ModalityCount {
                expected: m,
                got: timesteps.len(),
            });
        }
        for (i, z) in latents.iter().enumerate() {
            if z.dim() != self.config.latent_shape {
                return Err(ModelError::LatentShape {
                    modality: i,
                    expected: self.config.latent_shape,
                    got: z.dim(),
                });
            }
        }
        for (i, &t) in timesteps.iter().enumerate() {
            if t > self.config.max_timestep {
                return Err(ModelError::TimestepRange {
                    modality: i,
                    t,
                    max: self.config.max_timestep,
                });
            }
        }
        Ok(())
    }

    /// Embeds latents and timesteps into the full token sequence
    /// `[e_1..e_M, h_1..h_M]` plus positional embedding.
    pub(crate) fn embed_sequence<R: Rng + ?Sized>(
        &self,
        latents: &[Array3<F>],
        timesteps: &[usize],
        mut dropout_rng: Option<&mut R>,
    ) -> Result<(Array2<F>, EmbedCache<F>), ModelError> {
        let m = self.config.num_modalities;
        let n = self.config.tokens_per_modality();
        let d = self.config.embed_dim;
        let mut seq = Array2::<F>::zeros((self.config.seq_len(), d));
        let mut cache = EmbedCache {
            patch_tokens: Vec::with_capacity(m),
            time_sin: Vec::with_capacity(m),
            time_pre: Vec::with_capacity(m),
            time_act: Vec::with_capacity(m),
            dropout_masks: Vec::with_capacity(m),
        };
        for i in 0..m {
            let sin = nn::sinusoidal_embedding::<F>(timesteps[i] as f64, d, TIME_EMBED_BASE);
            let ids1 = self.wiring.time_fc1[i];
            let ids2 = self.wiring.time_fc2[i];
            let pre = sin.dot(&self.w2(ids1.w)) + &self.w1(ids1.b);
            let act = pre.mapv(nn::silu);
            let e = act.dot(&self.w2(ids2.w)) + &self.w1(ids2.b);
            seq.row_mut(i).assign(&e);
            cache.time_sin.push(sin);
            cache.time_pre.push(pre);
            cache.time_act.push(act);
        }
        for i in 0..m {
            let tokens = patchify(&latents[i], self.config.patch_size)?;
            let ids = self.wiring.patch_embed[i];
            let h = nn::linear_forward(&tokens.view(), &self.w2(ids.w), &self.w1(ids.b));
            seq.slice_mut(s![m + i * n..m + (i + 1) * n, ..]).assign(&h);
            cache.patch_tokens.push(tokens);
        }
        seq = seq + &self.w2(self.wiring.pos_embed);
        // token dropout per modality, inverted scaling
        for i in 0..m {
            let rate = self
                .config
                .dropout_overrides
                .as_ref()
                .map(|r| r[i])
                .unwrap_or(self.config.dropout_rate);
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep_scale = F::from_f64(1.0 / (1.0 - rate));
                    let mask = Array1::from_shape_fn(n, |_| {
                        if rng.gen::<f64>() < rate {
                            F::zero()
                        } else {
                            keep_scale
                        }
                    });
                    let mut rows = seq.slice_mut(s![m + i * n..m + (i + 1) * n, ..]);
                    for (mut row, &mv) in rows.rows_mut().into_iter().zip(mask.iter()) {
                        row.mapv_inplace(|v| v * mv);
                    }
                    Some(mask)
                }
                _ => None,
            };
            cache.dropout_masks.push(mask);
        }
        Ok((seq, cache))
    }

    pub(crate) fn block_forward(&self, k: usize, x: Array2<F>) -> (Array2<F>, BlockCache<F>) {
        let ids = self.wiring.blocks[k];
        let (ln1_out, xhat1, rstd1) = nn::layernorm_forward(
            &x.view(),
            &self.w1(ids.norm1.gain),
            &self.w1(ids.norm1.bias),
        );
        let (attn_out, attn) = nn::attention_forward(
            &ln1_out.view(),
            &self.w2(ids.qkv.w),
            &self.w1(ids.qkv.b),
            &self.w2(ids.proj.w),
            &self.w1(ids.proj.b),
            self.config.num_heads,
        );
        let x_mid = &x + &attn_out;
        let (ln2_out, xhat2, rstd2) = nn::layernorm_forward(
            &x_mid.view(),
            &self.w1(ids.norm2.gain),
            &self.w1(ids.norm2.bias),
        );
        let fc1_pre = nn::linear_forward(&ln2_out.view(), &self.w2(ids.fc1.w), &self.w1(ids.fc1.b));
        let act = fc1_pre.mapv(nn::gelu);
        let mlp_out = nn::linear_forward(&act.view(), &self.w2(ids.fc2.w), &self.w1(ids.fc2.b));
        let x_out = &x_mid + &mlp_out;
        (
            x_out,
            BlockCache {
                xhat1,
                rstd1,
                ln1_out,
                attn,
                xhat2,
                rstd2,
                ln2_out,
                fc1_pre,
                act,
            },
        )
    }

    /// Runs the trunk: in-blocks push skips, out-blocks concatenate and
    /// project them back in.
    fn trunk_forward(&self, mut x: Array2<F>, cache: &mut ForwardCache<F>) -> Array2<F> {
        let half = self.config.depth / 2;
        let mut skip_stack: Vec<Array2<F>> = Vec::with_capacity(half);
        for k in 0..half {
            let (next, bc) = self.block_forward(k, x);
            cache.blocks.push(bc);
            skip_stack.push(next.clone());
            x = next;
        }
        for j in 0..half {
            let skip = skip_stack.pop().expect("skip stack balanced");
            let cat = concatenate(Axis(1), &[x.view(), skip.view()]).expect("same row count");
            let ids = self.wiring.skips[j];
            let projected = nn::linear_forward(&cat.view(), &self.w2(ids.w), &self.w1(ids.b));
            cache.skip_cat.push(cat);
            let (next, bc) = self.block_forward(half + j, projected);
            cache.blocks.push(bc);
            x = next;
        }
        x
    }

    pub(crate) fn heads_forward(
        &self,
        x: &Array2<F>,
        cache: Option<&mut ForwardCache<F>>,
    ) -> Result<Vec<Array3<F>>, ModelError> {
        let m = self.config.num_modalities;
        let n = self.config.tokens_per_modality();
        let (c, h, w) = self.config.latent_shape;
        let mut xhats = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        let mut outputs = Vec::with_capacity(m);
        for i in 0..m {
            let rows = x.slice(s![m + i * n..m + (i + 1) * n, ..]);
            let norm = self.wiring.head_norm[i];
            let out = self.wiring.head_out[i];
            let (y, xhat, rstd) =
                nn::layernorm_forward(&rows, &self.w1(norm.gain), &self.w1(norm.bias));
            let tokens = nn::linear_forward(&y.view(), &self.w2(out.w), &self.w1(out.b));
            outputs.push(unpatchify(&tokens.view(), c, h, w, self.config.patch_size)?);
            xhats.push(xhat);
            rstds.push(rstd);
        }
        if let Some(cache) = cache {
            cache.head_xhat = xhats;
            cache.head_rstd = rstds;
        }
        Ok(outputs)
    }

    fn forward_cached<R: Rng + ?Sized>(
        &self,
        latents: &[Array3<F>],
        timesteps: &[usize],
        dropout_rng: Option<&mut R>,
    ) -> Result<(Vec<Array3<F>>, ForwardCache<F>), ModelError> {
        self.validate_inputs(latents, timesteps)?;
        let (seq, embed) = self.embed_sequence(latents, timesteps, dropout_rng)?;
        let mut cache = ForwardCache {
            embed,
            blocks: Vec::with_capacity(self.config.depth),
            skip_cat: Vec::with_capacity(self.config.depth / 2),
            head_xhat: Vec::new(),
            head_rstd: Vec::new(),
        };
        let x = self.trunk_forward(seq, &mut cache);
        let outputs = self.heads_forward(&x, Some(&mut cache))?;
        Ok((outputs, cache))
    }

    /// Predicts the per-modality noise components for one scene. Output `i`
    /// has the same shape as latent `i`; with dropout disabled the result is
    /// a deterministic function of parameters, latents and timesteps.
    pub fn forward_denoise(
        &self,
        latents: &[Array3<F>],
        timesteps: &[usize],
    ) -> Result<Vec<Array3<F>>, ModelError> {
        let (outputs, _) = self.forward_cached::<ChaCha8Rng>(latents, timesteps, None)?;
        Ok(outputs)
    }

    fn block_backward(
        &self,
        k: usize,
        bc: &BlockCache<F>,
        dx_out: Array2<F>,
        grad: &mut [F],
    ) -> Array2<F> {
        let ids = self.wiring.blocks[k];
        // mlp branch
        let (dact, dw_fc2, db_fc2) =
            nn::linear_backward(&bc.act.view(), &self.w2(ids.fc2.w), &dx_out.view());
        acc(grad, &self.layout, ids.fc2.w, dw_fc2.iter());
        acc(grad, &self.layout, ids.fc2.b, db_fc2.iter());
        let dfc1_pre = &dact * &bc.fc1_pre.mapv(nn::gelu_prime);
        let (dln2, dw_fc1, db_fc1) =
            nn::linear_backward(&bc.ln2_out.view(), &self.w2(ids.fc1.w), &dfc1_pre.view());
        acc(grad, &self.layout, ids.fc1.w, dw_fc1.iter());
        acc(grad, &self.layout, ids.fc1.b, db_fc1.iter());
        let (dx_ln2, dg2, db2) = nn::layernorm_backward(
            &dln2.view(),
            &bc.xhat2.view(),
            &bc.rstd2.view(),
            &self.w1(ids.norm2.gain),
        );
        acc(grad, &self.layout, ids.norm2.gain, dg2.iter());
        acc(grad, &self.layout, ids.norm2.bias, db2.iter());
        let dx_mid = dx_out + dx_ln2;
        // attention branch
        let grads = nn::attention_backward(
            &bc.ln1_out.view(),
            &self.w2(ids.qkv.w),
            &self.w2(ids.proj.w),
            &bc.attn,
            &dx_mid.view(),
            self.config.num_heads,
        );
        acc(grad, &self.layout, ids.qkv.w, grads.dw_qkv.iter());
        acc(grad, &self.layout, ids.qkv.b, grads.db_qkv.iter());
        acc(grad, &self.layout, ids.proj.w, grads.dw_proj.iter());
        acc(grad, &self.layout, ids.proj.b, grads.db_proj.iter());
        let (dx_ln1, dg1, db1) = nn::layernorm_backward(
            &grads.dx.view(),
            &bc.xhat1.view(),
            &bc.rstd1.view(),
            &self.w1(ids.norm1.gain),
        );
        acc(grad, &self.layout, ids.norm1.gain, dg1.iter());
        acc(grad, &self.layout, ids.norm1.bias, db1.iter());
        dx_mid + dx_ln1
    }

    /// Computes the masked noise-regression loss and its gradient for one
    /// scene. `noise_targets[i]` is `None` for modalities excluded from the
    /// loss (those drawn at `t = 0`); their heads receive exactly zero
    /// gradient.
    ///
    /// Returns the sum of squared errors, the number of included elements,
    /// and the gradient of `sum_sq / num_elements`. When every modality is
    /// excluded the gradient is zero and `num_elements` is 0.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        latents: &[Array3<F>],
        timesteps: &[usize],
        noise_targets: &[Option<Array3<F>>],
        dropout_rng: Option<&mut R>,
    ) -> Result<LossGrad<F>, ModelError> {
        let m = self.config.num_modalities;
        if noise_targets.len() != m {
            return Err(ModelError::ModalityCount {
                expected: m,
                got: noise_targets.len(),
            });
        }
        for (i, t) in noise_targets.iter().enumerate() {
            if let Some(t) = t {
                if t.dim() != self.config.latent_shape {
                    return Err(ModelError::LatentShape {
                        modality: i,
                        expected: self.config.latent_shape,
                        got: t.dim(),
                    });
                }
            }
        }
        let (outputs, cache) = self.forward_cached(latents, timesteps, dropout_rng)?;
        let mut sum_sq = F::zero();
        let mut num_elements = 0usize;
        let mut diffs: Vec<Option<Array3<F>>> = Vec::with_capacity(m);
        for (out, target) in outputs.iter().zip(noise_targets.iter()) {
            match target {
                Some(t) => {
                    let diff = out - t;
                    sum_sq = sum_sq + diff.iter().map(|&v| v * v).sum::<F>();
                    num_elements += diff.len();
                    diffs.push(Some(diff));
                }
                None => diffs.push(None),
            }
        }
        let mut grad = vec![F::zero(); self.layout.total_len()];
        if num_elements == 0 {
            return Ok(LossGrad {
                sum_sq,
                num_elements,
                grad,
            });
        }
        // d(sum_sq / n)/d eps_hat = 2 * diff / n
        let scale = F::from_f64(2.0 / num_elements as f64);
        let n = self.config.tokens_per_modality();
        let d = self.config.embed_dim;
        let mut dx = Array2::<F>::zeros((self.config.seq_len(), d));
        for i in 0..m {
            let Some(diff) = &diffs[i] else { continue };
            let dout = diff.mapv(|v| v * scale);
            let dtokens = patchify(&dout, self.config.patch_size)?;
            let norm = self.wiring.head_norm[i];
            let out_ids = self.wiring.head_out[i];
            let y = &cache.head_xhat[i] * &self.w1(norm.gain) + &self.w1(norm.bias);
            let (dy, dw_head, db_head) =
                nn::linear_backward(&y.view(), &self.w2(out_ids.w), &dtokens.view());
            acc(&mut grad, &self.layout, out_ids.w, dw_head.iter());
            acc(&mut grad, &self.layout, out_ids.b, db_head.iter());
            let (drows, dg, db) = nn::layernorm_backward(
                &dy.view(),
                &cache.head_xhat[i].view(),
                &cache.head_rstd[i].view(),
                &self.w1(norm.gain),
            );
            acc(&mut grad, &self.layout, norm.gain, dg.iter());
            acc(&mut grad, &self.layout, norm.bias, db.iter());
            let mut rows = dx.slice_mut(s![m + i * n..m + (i + 1) * n, ..]);
            rows += &drows;
        }

        // trunk backward: out-blocks and their skip projections first, then
        // in-blocks with the accumulated skip gradients.
        let half = self.config.depth / 2;
        let mut dskips: Vec<Option<Array2<F>>> = (0..half).map(|_| None).collect();
        for j in (0..half).rev() {
            dx = self.block_backward(half + j, &cache.blocks[half + j], dx, &mut grad);
            let ids = self.wiring.skips[j];
            let (dcat, dw, db) =
                nn::linear_backward(&cache.skip_cat[j].view(), &self.w2(ids.w), &dx.view());
            acc(&mut grad, &self.layout, ids.w, dw.iter());
            acc(&mut grad, &self.layout, ids.b, db.iter());
            dx = dcat.slice(s![.., 0..d]).to_owned();
            dskips[half - 1 - j] = Some(dcat.slice(s![.., d..2 * d]).to_owned());
        }
        for k in (0..half).rev() {
            if let Some(ds) = dskips[k].take() {
                dx += &ds;
            }
            dx = self.block_backward(k, &cache.blocks[k], dx, &mut grad);
        }

        // dropout backward
        for i in 0..m {
            if let Some(mask) = &cache.embed.dropout_masks[i] {
                let mut rows = dx.slice_mut(s![m + i * n..m + (i + 1) * n, ..]);
                for (mut row, &mv) in rows.rows_mut().into_iter().zip(mask.iter()) {
                    row.mapv_inplace(|v| v * mv);
                }
            }
        }
        acc(&mut grad, &self.layout, self.wiring.pos_embed, dx.iter());
        // time tokens
        for i in 0..m {
            let de = dx.row(i).insert_axis(Axis(0));
            let ids1 = self.wiring.time_fc1[i];
            let ids2 = self.wiring.time_fc2[i];
            let act = cache.embed.time_act[i].view().insert_axis(Axis(0));
            let (dact, dw2, db2) = nn::linear_backward(&act, &self.w2(ids2.w), &de);
            acc(&mut grad, &self.layout, ids2.w, dw2.iter());
            acc(&mut grad, &self.layout, ids2.b, db2.iter());
            let dpre = &dact.row(0) * &cache.embed.time_pre[i].mapv(nn::silu_prime);
            let dpre2 = dpre.insert_axis(Axis(0));
            let sin = cache.embed.time_sin[i].view().insert_axis(Axis(0));
            let (_dsin, dw1, db1) = nn::linear_backward(&sin, &self.w2(ids1.w), &dpre2.view());
            acc(&mut grad, &self.layout, ids1.w, dw1.iter());
            acc(&mut grad, &self.layout, ids1.b, db1.iter());
        }
        // patch tokens
        for i in 0..m {
            let dh = dx.slice(s![m + i * n..m + (i + 1) * n, ..]);
            let ids = self.wiring.patch_embed[i];
            let (_dtok, dw, db) =
                nn::linear_backward(&cache.embed.patch_tokens[i].view(), &self.w2(ids.w), &dh);
            acc(&mut grad, &self.layout, ids.w, dw.iter());
            acc(&mut grad, &self.layout, ids.b, db.iter());
        }
        Ok(LossGrad {
            sum_sq,
            num_elements,
            grad,
        })
    }
}

fn acc<'a, F: Scalar, I: Iterator<Item = &'a F>>(
    grad: &mut [F],
    layout: &ParamLayout,
    id: usize,
    vals: I,
) {
    let e = &layout.entries()[id];
    let slot = &mut grad[e.offset..e.offset + e.len];
    let mut count = 0;
    for (g, &v) in slot.iter_mut().zip(vals) {
        *g = *g + v;
        count += 1;
    }
    debug_assert_eq!(count, e.len);
}
