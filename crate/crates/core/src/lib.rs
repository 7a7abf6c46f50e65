//! Multi-modal sequence diffusion in latent space.
//!
//! One transformer denoiser consumes every modality of a scene as a single
//! token sequence, with an independent diffusion timestep per modality. The
//! same trained network then performs joint unconditional generation and
//! zero-shot translation between any subset of modalities, simply by pinning
//! the conditioning modalities at timestep zero.
//!
//! The crate is organised around the stages of that pipeline:
//!
//! - [`schedule`] — the discrete noise schedule and closed-form diffusion math
//! - [`backbone`] — the skip-connected transformer denoiser (forward and
//!   hand-written backward pass)
//! - [`trainer`] — the regression-loss training loop, EMA shadow weights and
//!   checkpointing
//! - [`sampler`] — ancestral and DPM-Solver++(2M) sampling, joint,
//!   conditional and looped
//! - [`codec`] — the image <-> latent boundary (identity pixel codec or a
//!   tiny trained autoencoder)
//! - [`synthdata`] — a procedural generator of aligned multi-modal scenes
//!   with known cross-modal ground truth, plus a paired-PNG loader
//! - [`eval`] — FID and k-NN manifold precision/recall over pluggable
//!   feature extractors
//!
//! Everything heavier than a single forward pass is data-parallel over
//! scenes, chains or batch items via `rayon`; building with
//! `--no-default-features` swaps in sequential fallbacks.

pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod eval;
pub mod nn;
pub mod oracle;
pub mod par;
pub mod sampler;
pub mod schedule;
pub mod synthdata;
pub mod trainer;

use ndarray::{LinalgScalar, ScalarOperand};
use rand::Rng;

/// Floating-point element type for the model math.
///
/// Training and sampling run in `f32`; the gradient checks run the identical
/// code in `f64`.
pub trait Scalar:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// One draw from the standard normal distribution.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
}

/// Derives an independent stream seed from a base seed and a call id, so
/// parallel workers never share a random stream.
pub fn derive_seed(base: u64, call_id: u64) -> u64 {
    // splitmix64 over the pair; cheap and well mixed.
    let mut z = base
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(call_id)
        .wrapping_add(0x2545_f491_4f6c_dd1d);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
