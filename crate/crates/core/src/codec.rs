//! Encoder/decoder boundary between image space and the diffusion latent
//! space.
//!
//! The default identity pixel codec maps `[0, 1]` images affinely to
//! `[-1, 1]` latents of the same shape. The tiny autoencoder is an optional
//! pre-training stage: a per-patch variational MLP that maps each 4x4 image
//! patch to a 4-channel latent pixel (4x spatial downsample), trained with a
//! plain reconstruction + KL objective and frozen before diffusion training.
//! All modalities share one codec instance so they live in a common latent
//! space.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{patchify, unpatchify, ParamLayout};
use crate::checkpoint::{CheckpointError, TensorArchive};
use crate::nn;
use crate::Scalar;

/// Spatial patch consumed per latent pixel by the tiny autoencoder.
pub const AE_PATCH: usize = 4;
/// Latent channels produced by the tiny autoencoder.
pub const AE_LATENT_CHANNELS: usize = 4;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid codec spec: {0}")]
    InvalidSpec(String),
    #[error("image shape {got:?} does not match codec {expected:?}")]
    ImageShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("latent shape {got:?} does not match codec {expected:?}")]
    LatentShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("image value {0} outside [0, 1]")]
    RangeViolation(f32),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    IdentityPixel,
    TinyAutoencoder,
}

/// Declared codec contract: kind plus image and latent shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecSpec {
    pub kind: CodecKind,
    pub image_shape: (usize, usize, usize),
}

impl CodecSpec {
    pub fn identity(image_shape: (usize, usize, usize)) -> Self {
        Self {
            kind: CodecKind::IdentityPixel,
            image_shape,
        }
    }

    pub fn tiny_autoencoder(image_shape: (usize, usize, usize)) -> Self {
        Self {
            kind: CodecKind::TinyAutoencoder,
            image_shape,
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let (c, h, w) = self.image_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(CodecError::InvalidSpec(format!(
                "degenerate image shape {:?}",
                self.image_shape
            )));
        }
        if self.kind == CodecKind::TinyAutoencoder && (h % AE_PATCH != 0 || w % AE_PATCH != 0) {
            return Err(CodecError::InvalidSpec(format!(
                "image {h}x{w} not divisible by the autoencoder patch {AE_PATCH}"
            )));
        }
        Ok(())
    }

    /// Latent shape: identical for the identity codec, `(4, H/4, W/4)` for
    /// the tiny autoencoder.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let (c, h, w) = self.image_shape;
        match self.kind {
            CodecKind::IdentityPixel => (c, h, w),
            CodecKind::TinyAutoencoder => (AE_LATENT_CHANNELS, h / AE_PATCH, w / AE_PATCH),
        }
    }
}

/// A ready-to-use codec instance.
#[derive(Debug, Clone)]
pub enum Codec {
    Identity(CodecSpec),
    Tiny(TinyAutoencoder),
}

impl Codec {
    pub fn identity(image_shape: (usize, usize, usize)) -> Result<Self, CodecError> {
        let spec = CodecSpec::identity(image_shape);
        spec.validate()?;
        Ok(Codec::Identity(spec))
    }

    pub fn spec(&self) -> CodecSpec {
        match self {
            Codec::Identity(spec) => spec.clone(),
            Codec::Tiny(ae) => CodecSpec::tiny_autoencoder(ae.image_shape),
        }
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.spec().image_shape
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.spec().latent_shape()
    }

    /// Maps an image in `[0, 1]` to a latent. The identity codec is the
    /// affine map `x * 2 - 1` with zero variance; the tiny autoencoder
    /// returns a sample from its learned Gaussian latent.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        image: &Array3<f32>,
        rng: &mut R,
    ) -> Result<Array3<f32>, CodecError> {
        let expected = self.image_shape();
        if image.dim() != expected {
            return Err(CodecError::ImageShape {
                expected,
                got: image.dim(),
            });
        }
        if let Some(&bad) = image.iter().find(|v| !(-1e-6..=1.0 + 1e-6).contains(&f64::from(**v))) {
            return Err(CodecError::RangeViolation(bad));
        }
        match self {
            Codec::Identity(_) => Ok(image.mapv(|v| v * 2.0 - 1.0)),
            Codec::Tiny(ae) => Ok(ae.encode(image, rng)),
        }
    }

    /// Maps a latent back to an image, clamped to `[0, 1]`.
    pub fn decode(&self, latent: &Array3<f32>) -> Result<Array3<f32>, CodecError> {
        let expected = self.latent_shape();
        if latent.dim() != expected {
            return Err(CodecError::LatentShape {
                expected,
                got: latent.dim(),
            });
        }
        match self {
            Codec::Identity(_) => Ok(latent.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))),
            Codec::Tiny(ae) => Ok(ae.decode(latent)),
        }
    }

    /// Writes codec parameters under `<prefix>/` in the archive (no-op for
    /// the parameter-free identity codec).
    pub fn write_to_archive(
        &self,
        archive: &mut TensorArchive,
        prefix: &str,
    ) -> Result<(), CheckpointError> {
        if let Codec::Tiny(ae) = self {
            for e in ae.layout.entries() {
                archive.put_f32(
                    &format!("{prefix}/{}", e.name),
                    &e.shape,
                    &ae.params[e.offset..e.offset + e.len],
                )?;
            }
        }
        Ok(())
    }

    /// Restores a tiny autoencoder from an archive namespace.
    pub fn tiny_from_archive(
        archive: &TensorArchive,
        prefix: &str,
        image_shape: (usize, usize, usize),
        hidden: usize,
    ) -> Result<Self, CodecError> {
        let mut ae = TinyAutoencoder::new(image_shape, hidden, 0)?;
        for e in ae.layout.entries().to_vec() {
            let (shape, vals) = archive.get_f32(&format!("{prefix}/{}", e.name))?;
            if shape != e.shape {
                return Err(CodecError::InvalidSpec(format!(
                    "codec tensor {} has shape {shape:?}, expected {:?}",
                    e.name, e.shape
                )));
            }
            ae.params[e.offset..e.offset + e.len].copy_from_slice(&vals);
        }
        Ok(Codec::Tiny(ae))
    }
}

#[derive(Debug, Clone, Copy)]
struct AeWiring {
    enc_fc1: (usize, usize),
    enc_mu: (usize, usize),
    enc_lv: (usize, usize),
    dec_fc1: (usize, usize),
    dec_out: (usize, usize),
}

/// Per-patch variational autoencoder: 4x4 image patches to 4-channel latent
/// pixels and back, one shared MLP for all patches.
#[derive(Debug, Clone)]
pub struct TinyAutoencoder {
    image_shape: (usize, usize, usize),
    hidden: usize,
    layout: ParamLayout,
    wiring: AeWiring,
    params: Vec<f32>,
}

/// Hyperparameters for the autoencoder pre-training stage.
#[derive(Debug, Clone)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch_patches: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_patches: 256,
            lr: 2e-3,
            kl_weight: 1e-4,
            hidden: 64,
            seed: 0,
        }
    }
}

impl TinyAutoencoder {
    pub fn new(
        image_shape: (usize, usize, usize),
        hidden: usize,
        seed: u64,
    ) -> Result<Self, CodecError> {
        let spec = CodecSpec::tiny_autoencoder(image_shape);
        spec.validate()?;
        let patch_dim = AE_PATCH * AE_PATCH * image_shape.0;
        let z = AE_LATENT_CHANNELS;
        let mut layout = ParamLayout::new();
        let linear = |layout: &mut ParamLayout, name: &str, rows: usize, cols: usize| {
            (
                layout.push(format!("{name}.weight"), &[rows, cols]),
                layout.push(format!("{name}.bias"), &[cols]),
            )
        };
        let wiring = AeWiring {
            enc_fc1: linear(&mut layout, "enc.fc1", patch_dim, hidden),
            enc_mu: linear(&mut layout, "enc.mu", hidden, z),
            enc_lv: linear(&mut layout, "enc.logvar", hidden, z),
            dec_fc1: linear(&mut layout, "dec.fc1", z, hidden),
            dec_out: linear(&mut layout, "dec.out", hidden, patch_dim),
        };
        let mut params = vec![0.0f32; layout.total_len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in layout.entries() {
            if e.name.ends_with(".weight") {
                for v in &mut params[e.offset..e.offset + e.len] {
                    *v = nn::trunc_normal(&mut rng, 0.05);
                }
            }
        }
        Ok(Self {
            image_shape,
            hidden,
            layout,
            wiring,
            params,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn w2(&self, id: usize) -> ArrayView2<'_, f32> {
        let e = &self.layout.entries()[id];
        ArrayView2::from_shape(
            (e.shape[0], e.shape[1]),
            &self.params[e.offset..e.offset + e.len],
        )
        .expect("layout consistent")
    }

    fn w1(&self, id: usize) -> ArrayView1<'_, f32> {
        let e = &self.layout.entries()[id];
        ArrayView1::from_shape(e.shape[0], &self.params[e.offset..e.offset + e.len])
            .expect("layout consistent")
    }

    /// Per-patch posterior parameters `(mu, logvar)`, each `(n_patches, 4)`.
    fn encode_dist(&self, image: &Array3<f32>) -> (Array2<f32>, Array2<f32>) {
        let patches = patchify(image, AE_PATCH).expect("validated shape");
        let h = nn::linear_forward(
            &patches.view(),
            &self.w2(self.wiring.enc_fc1.0),
            &self.w1(self.wiring.enc_fc1.1),
        )
        .mapv(nn::silu);
        let mu = nn::linear_forward(
            &h.view(),
            &self.w2(self.wiring.enc_mu.0),
            &self.w1(self.wiring.enc_mu.1),
        );
        let lv = nn::linear_forward(
            &h.view(),
            &self.w2(self.wiring.enc_lv.0),
            &self.w1(self.wiring.enc_lv.1),
        );
        (mu, lv)
    }

    /// Samples `z ~ N(mu, sigma)` per patch and assembles the latent grid.
    pub fn encode<R: Rng + ?Sized>(&self, image: &Array3<f32>, rng: &mut R) -> Array3<f32> {
        let (mu, lv) = self.encode_dist(image);
        let z = Array2::from_shape_fn(mu.dim(), |idx| {
            mu[idx] + (0.5 * lv[idx]).exp() * f32::std_normal(rng)
        });
        self.latent_from_rows(&z)
    }

    fn latent_from_rows(&self, z: &Array2<f32>) -> Array3<f32> {
        let (_, h, w) = self.image_shape;
        unpatchify(&z.view(), AE_LATENT_CHANNELS, h / AE_PATCH, w / AE_PATCH, 1)
            .expect("row count matches grid")
    }

    pub fn decode(&self, latent: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = self.image_shape;
        let z = patchify(latent, 1).expect("validated shape");
        let d1 = nn::linear_forward(
            &z.view(),
            &self.w2(self.wiring.dec_fc1.0),
            &self.w1(self.wiring.dec_fc1.1),
        )
        .mapv(nn::silu);
        let out = nn::linear_forward(
            &d1.view(),
            &self.w2(self.wiring.dec_out.0),
            &self.w1(self.wiring.dec_out.1),
        );
        unpatchify(&out.view(), c, h, w, AE_PATCH)
            .expect("validated shape")
            .mapv(|v| v.clamp(0.0, 1.0))
    }

    /// Trains on patches drawn from `images` with reconstruction + KL loss,
    /// returning the frozen codec.
    pub fn train(
        images: &[Array3<f32>],
        image_shape: (usize, usize, usize),
        config: &AeTrainConfig,
    ) -> Result<Self, CodecError> {
        let mut ae = Self::new(image_shape, config.hidden, config.seed)?;
        let mut all_patches: Vec<Array2<f32>> = Vec::with_capacity(images.len());
        for img in images {
            if img.dim() != image_shape {
                return Err(CodecError::ImageShape {
                    expected: image_shape,
                    got: img.dim(),
                });
            }
            all_patches.push(patchify(img, AE_PATCH).expect("validated shape"));
        }
        let rows: Vec<ArrayView1<f32>> = all_patches
            .iter()
            .flat_map(|p| p.rows().into_iter())
            .collect();
        if rows.is_empty() {
            return Err(CodecError::InvalidSpec("no training images".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(config.seed, 1));
        let mut m1 = vec![0.0f32; ae.params.len()];
        let mut m2 = vec![0.0f32; ae.params.len()];
        let patch_dim = AE_PATCH * AE_PATCH * image_shape.0;
        for step in 0..config.steps {
            let b = config.batch_patches.min(rows.len());
            let mut x = Array2::<f32>::zeros((b, patch_dim));
            for r in 0..b {
                let pick = rng.gen_range(0..rows.len());
                x.row_mut(r).assign(&rows[pick]);
            }
            let grad = ae.train_step_grad(&x, config.kl_weight, &mut rng);
            // adaptive moments, bias-corrected
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
            let c1 = 1.0 - b1.powi(step as i32 + 1);
            let c2 = 1.0 - b2.powi(step as i32 + 1);
            for i in 0..ae.params.len() {
                let g = grad[i] as f64;
                let n1 = b1 * m1[i] as f64 + (1.0 - b1) * g;
                let n2 = b2 * m2[i] as f64 + (1.0 - b2) * g * g;
                m1[i] = n1 as f32;
                m2[i] = n2 as f32;
                ae.params[i] -= (config.lr * (n1 / c1) / ((n2 / c2).sqrt() + eps)) as f32;
            }
        }
        Ok(ae)
    }

    /// Gradient of reconstruction MSE + KL over one batch of patch rows.
    fn train_step_grad<R: Rng + ?Sized>(
        &self,
        x: &Array2<f32>,
        kl_weight: f64,
        rng: &mut R,
    ) -> Vec<f32> {
        let w = &self.wiring;
        let h_pre = nn::linear_forward(&x.view(), &self.w2(w.enc_fc1.0), &self.w1(w.enc_fc1.1));
        let h = h_pre.mapv(nn::silu);
        let mu = nn::linear_forward(&h.view(), &self.w2(w.enc_mu.0), &self.w1(w.enc_mu.1));
        let lv = nn::linear_forward(&h.view(), &self.w2(w.enc_lv.0), &self.w1(w.enc_lv.1));
        let eps = Array2::from_shape_fn(mu.dim(), |_| f32::std_normal(rng));
        let z = &mu + &(lv.mapv(|v| (0.5 * v).exp()) * &eps);
        let d_pre = nn::linear_forward(&z.view(), &self.w2(w.dec_fc1.0), &self.w1(w.dec_fc1.1));
        let d1 = d_pre.mapv(nn::silu);
        let out = nn::linear_forward(&d1.view(), &self.w2(w.dec_out.0), &self.w1(w.dec_out.1));

        let n_rec = out.len() as f32;
        let n_kl = mu.len() as f32;
        let klw = kl_weight as f32;

        let mut grad = vec![0.0f32; self.params.len()];
        let mut put = |ids: (usize, usize), dw: &Array2<f32>, db: &ndarray::Array1<f32>| {
            let ew = &self.layout.entries()[ids.0];
            for (g, &v) in grad[ew.offset..ew.offset + ew.len].iter_mut().zip(dw.iter()) {
                *g += v;
            }
            let eb = &self.layout.entries()[ids.1];
            for (g, &v) in grad[eb.offset..eb.offset + eb.len].iter_mut().zip(db.iter()) {
                *g += v;
            }
        };

        let dout = (&out - x).mapv(|v| 2.0 * v / n_rec);
        let (dd1, dwo, dbo) = nn::linear_backward(&d1.view(), &self.w2(w.dec_out.0), &dout.view());
        put(w.dec_out, &dwo, &dbo);
        let dd_pre = &dd1 * &d_pre.mapv(nn::silu_prime);
        let (dz_rec, dwd, dbd) =
            nn::linear_backward(&z.view(), &self.w2(w.dec_fc1.0), &dd_pre.view());
        put(w.dec_fc1, &dwd, &dbd);

        // z = mu + exp(lv/2) * eps, plus the KL term on (mu, lv)
        let dmu = &dz_rec + &mu.mapv(|v| klw * v / n_kl);
        let dlv = &(&dz_rec * &eps * &lv.mapv(|v| 0.5 * (0.5 * v).exp()))
            + &lv.mapv(|v| klw * 0.5 * (v.exp() - 1.0) / n_kl);

        let (dh_mu, dwm, dbm) = nn::linear_backward(&h.view(), &self.w2(w.enc_mu.0), &dmu.view());
        put(w.enc_mu, &dwm, &dbm);
        let (dh_lv, dwv, dbv) = nn::linear_backward(&h.view(), &self.w2(w.enc_lv.0), &dlv.view());
        put(w.enc_lv, &dwv, &dbv);
        let dh = dh_mu + dh_lv;
        let dh_pre = &dh * &h_pre.mapv(nn::silu_prime);
        let (_, dw1, db1) = nn::linear_backward(&x.view(), &self.w2(w.enc_fc1.0), &dh_pre.view());
        put(w.enc_fc1, &dw1, &db1);
        grad
    }
}

/// Mean per-pixel squared reconstruction error of `decode(encode(x))` over
/// a held-out set.
pub fn reconstruction_mse<R: Rng + ?Sized>(
    codec: &Codec,
    images: &[Array3<f32>],
    rng: &mut R,
) -> Result<f64, CodecError> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for img in images {
        let rec = codec.decode(&codec.encode(img, rng)?)?;
        total += (&rec - img).iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>();
        count += img.len();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, Modality};
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn identity_midpoint_maps_to_zero() {
        let codec = Codec::identity((1, 4, 4)).unwrap();
        let img = Array3::from_elem((1, 4, 4), 0.5f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let latent = codec.encode(&img, &mut rng).unwrap();
        assert!(latent.iter().all(|&v| v == 0.0));
        let back = codec.decode(&Array3::zeros((1, 4, 4))).unwrap();
        assert!(back.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_clamps_out_of_range_latents() {
        let codec = Codec::identity((1, 2, 2)).unwrap();
        let latent = Array3::from_elem((1, 2, 2), 3.0f32);
        let img = codec.decode(&latent).unwrap();
        assert!(img.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identity_rejects_out_of_range_images() {
        let codec = Codec::identity((1, 2, 2)).unwrap();
        let img = Array3::from_elem((1, 2, 2), 1.5f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            codec.encode(&img, &mut rng),
            Err(CodecError::RangeViolation(_))
        ));
    }

    #[test]
    fn identity_rejects_shape_mismatch() {
        let codec = Codec::identity((1, 4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            codec.encode(&Array3::zeros((1, 2, 2)), &mut rng),
            Err(CodecError::ImageShape { .. })
        ));
        assert!(matches!(
            codec.decode(&Array3::zeros((3, 4, 4))),
            Err(CodecError::LatentShape { .. })
        ));
    }

    proptest! {
        #[test]
        fn identity_round_trip(seed in 0u64..500) {
            let codec = Codec::identity((2, 4, 4)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Array3::from_shape_fn((2, 4, 4), |_| rand::Rng::gen::<f32>(&mut rng));
            let latent = codec.encode(&img, &mut rng).unwrap();
            prop_assert!(latent.iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = codec.decode(&latent).unwrap();
            for (a, b) in back.iter().zip(img.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tiny_autoencoder_shapes() {
        let ae = TinyAutoencoder::new((1, 16, 16), 32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Array3::from_elem((1, 16, 16), 0.25f32);
        let z = ae.encode(&img, &mut rng);
        assert_eq!(z.dim(), (4, 4, 4));
        let back = ae.decode(&z);
        assert_eq!(back.dim(), (1, 16, 16));
        assert!(back.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    /// Reconstruction-quality gate measured on held-out scenes.
    #[test]
    fn tiny_autoencoder_reconstructs_synthetic_scenes() {
        let train: Vec<Array3<f32>> = (0..96)
            .flat_map(|seed| {
                let scene = generate_scene(seed, 16).unwrap();
                Modality::ALL
                    .iter()
                    .map(move |&m| scene.grayscale_image(m))
                    .collect::<Vec<_>>()
            })
            .collect();
        let held_out: Vec<Array3<f32>> = (1000..1016)
            .flat_map(|seed| {
                let scene = generate_scene(seed, 16).unwrap();
                Modality::ALL
                    .iter()
                    .map(move |&m| scene.grayscale_image(m))
                    .collect::<Vec<_>>()
            })
            .collect();
        let config = AeTrainConfig {
            steps: 3000,
            hidden: 96,
            seed: 3,
            ..AeTrainConfig::default()
        };
        let ae = TinyAutoencoder::train(&train, (1, 16, 16), &config).unwrap();
        let codec = Codec::Tiny(ae);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mse = reconstruction_mse(&codec, &held_out, &mut rng).unwrap();
        assert!(mse < 0.01, "held-out reconstruction mse {mse}");
    }

    #[test]
    fn tiny_autoencoder_archive_round_trip() {
        let ae = TinyAutoencoder::new((1, 16, 16), 32, 7).unwrap();
        let codec = Codec::Tiny(ae);
        let mut archive = TensorArchive::new();
        codec.write_to_archive(&mut archive, "codec").unwrap();
        let restored = Codec::tiny_from_archive(&archive, "codec", (1, 16, 16), 32).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(11);
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let img = Array3::from_elem((1, 16, 16), 0.75f32);
        let a = codec.encode(&img, &mut rng1).unwrap();
        let b = restored.encode(&img, &mut rng2).unwrap();
        assert_eq!(a, b);
    }
}
