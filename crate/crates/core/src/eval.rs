//! Generative-model metrics: FID and k-NN manifold precision/recall over
//! pluggable feature extractors.
//!
//! The paper-scale pretrained feature networks are external artifacts; the
//! metric math is identical under any extractor, so desk-scale extractors
//! are substituted and every report records which one produced it.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::Scalar;

pub mod linalg;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("images must share one shape; image {index} is {got:?}, expected {expected:?}")]
    MixedShapes {
        index: usize,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("image {h}x{w} not divisible into 4x4 blocks")]
    BadBlockShape { h: usize, w: usize },
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("k = {k} out of range for set sizes {n_real}/{n_gen}")]
    BadK { k: usize, n_real: usize, n_gen: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Feature extractors over aligned image sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extractor {
    /// Raw pixel vectorisation.
    FlattenPixels,
    /// Per-4x4-block mean and variance, concatenated over blocks and
    /// channels.
    PatchStats,
    /// Fixed seeded Gaussian projection of flattened pixels to `dim`.
    RandomProjection { seed: u64, dim: usize },
}

impl Extractor {
    pub fn id(&self) -> String {
        match self {
            Extractor::FlattenPixels => "flatten_pixels".into(),
            Extractor::PatchStats => "patch_stats".into(),
            Extractor::RandomProjection { seed, dim } => {
                format!("random_projection(seed={seed},dim={dim})")
            }
        }
    }
}

/// Extracted features: one row per sample.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn from_rows(features: Array2<f64>, extractor_id: &str) -> Self {
        Self {
            features,
            extractor_id: extractor_id.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Runs the extractor over a set of same-shape images.
pub fn extract_features(images: &[Array3<f32>], extractor: Extractor) -> Result<FeatureSet, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyInput("no images".into()));
    }
    let shape = images[0].dim();
    for (i, img) in images.iter().enumerate() {
        if img.dim() != shape {
            return Err(EvalError::MixedShapes {
                index: i,
                expected: shape,
                got: img.dim(),
            });
        }
    }
    let (c, h, w) = shape;
    let flat_dim = c * h * w;
    let rows = match extractor {
        Extractor::FlattenPixels => {
            let mut out = Array2::<f64>::zeros((images.len(), flat_dim));
            for (r, img) in images.iter().enumerate() {
                for (o, &v) in out.row_mut(r).iter_mut().zip(img.iter()) {
                    *o = v as f64;
                }
            }
            out
        }
        Extractor::PatchStats => {
            if h % 4 != 0 || w % 4 != 0 {
                return Err(EvalError::BadBlockShape { h, w });
            }
            let (bh, bw) = (h / 4, w / 4);
            let dim = 2 * c * bh * bw;
            let mut out = Array2::<f64>::zeros((images.len(), dim));
            for (r, img) in images.iter().enumerate() {
                let mut col = 0;
                for ch in 0..c {
                    for by in 0..bh {
                        for bx in 0..bw {
                            let mut sum = 0.0f64;
                            let mut sum_sq = 0.0f64;
                            for py in 0..4 {
                                for px in 0..4 {
                                    let v = img[[ch, by * 4 + py, bx * 4 + px]] as f64;
                                    sum += v;
                                    sum_sq += v * v;
                                }
                            }
                            let mean = sum / 16.0;
                            out[[r, col]] = mean;
                            out[[r, col + 1]] = sum_sq / 16.0 - mean * mean;
                            col += 2;
                        }
                    }
                }
            }
            out
        }
        Extractor::RandomProjection { seed, dim } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 1.0 / (dim as f64).sqrt();
            let proj = Array2::<f64>::from_shape_fn((flat_dim, dim), |_| {
                f64::std_normal(&mut rng) * scale
            });
            let mut flat = Array2::<f64>::zeros((images.len(), flat_dim));
            for (r, img) in images.iter().enumerate() {
                for (o, &v) in flat.row_mut(r).iter_mut().zip(img.iter()) {
                    *o = v as f64;
                }
            }
            flat.dot(&proj)
        }
    };
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("features".into()));
    }
    Ok(FeatureSet::from_rows(rows, &extractor.id()))
}

fn mean_and_covariance(features: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = features.nrows() as f64;
    let mean = features.sum_axis(Axis(0)) / n;
    let centered = features - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n - 1.0);
    (mean, cov)
}

/// Frechet distance between Gaussians fitted to the two feature sets:
/// `||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2})`.
///
/// The matrix square root goes through two symmetric eigendecompositions;
/// small negative eigenvalues (below `1e-8 * max`) are clamped to zero.
pub fn fid(real: &FeatureSet, gen: &FeatureSet) -> Result<f64, EvalError> {
    if real.dim() != gen.dim() {
        return Err(EvalError::DimMismatch(real.dim(), gen.dim()));
    }
    if real.len() < 2 || gen.len() < 2 {
        return Err(EvalError::TooFewSamples {
            need: 2,
            got: real.len().min(gen.len()),
        });
    }
    let (mu_r, cov_r) = mean_and_covariance(&real.features);
    let (mu_g, cov_g) = mean_and_covariance(&gen.features);
    let mean_term: f64 = mu_r
        .iter()
        .zip(mu_g.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let trace_r = cov_r.diag().sum();
    let trace_g = cov_g.diag().sum();
    let trace_sqrt = linalg::trace_sqrt_product(&cov_r, &cov_g)?;
    let value = mean_term + trace_r + trace_g - 2.0 * trace_sqrt;
    if !value.is_finite() {
        return Err(EvalError::NonFinite("fid".into()));
    }
    Ok(value)
}

/// Precision, recall and their harmonic mean from the k-NN manifold
/// estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Squared Euclidean distances from each row of `a` to each row of `b`,
/// parallel over rows of `a`.
fn distance_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut out = vec![0.0f64; na * nb];
    crate::par::for_each_row(&mut out, nb, |i, row| {
        let ai = a.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            let bj = b.row(j);
            let mut d = 0.0;
            for (&x, &y) in ai.iter().zip(bj.iter()) {
                d += (x - y) * (x - y);
            }
            *slot = d;
        }
    });
    Array2::from_shape_vec((na, nb), out).expect("size matches")
}

/// Squared radius of each point's k-th nearest neighbour within its own set
/// (self excluded).
fn knn_radii_sq(set: &Array2<f64>, k: usize) -> Vec<f64> {
    let dist = distance_matrix(set, set);
    let n = set.nrows();
    let mut radii = vec![0.0f64; n];
    crate::par::for_each_row(&mut radii, 1, |i, slot| {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[[i, j]]).collect();
        row.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite"));
        slot[0] = row[k - 1];
    });
    radii
}

/// Fraction of `points` that land inside at least one ball of the manifold
/// estimated from `support` (radius = distance to the k-th neighbour).
fn coverage(points: &Array2<f64>, support: &Array2<f64>, k: usize) -> f64 {
    let radii = knn_radii_sq(support, k);
    let dist = distance_matrix(points, support);
    let mut hits = vec![0u8; points.nrows()];
    crate::par::for_each_row(&mut hits, 1, |i, slot| {
        let covered = (0..support.nrows()).any(|j| dist[[i, j]] <= radii[j]);
        slot[0] = covered as u8;
    });
    hits.iter().map(|&h| h as usize).sum::<usize>() as f64 / points.nrows() as f64
}

/// Manifold precision/recall: precision is the fraction of generated points
/// within the real manifold estimate, recall the fraction of real points
/// within the generated manifold estimate. Exact brute-force neighbours.
pub fn knn_precision_recall(
    real: &FeatureSet,
    gen: &FeatureSet,
    k: usize,
) -> Result<PrecisionRecall, EvalError> {
    if real.dim() != gen.dim() {
        return Err(EvalError::DimMismatch(real.dim(), gen.dim()));
    }
    if k == 0 || k >= real.len() || k >= gen.len() {
        return Err(EvalError::BadK {
            k,
            n_real: real.len(),
            n_gen: gen.len(),
        });
    }
    let precision = coverage(&gen.features, &real.features, k);
    let recall = coverage(&real.features, &gen.features, k);
    Ok(PrecisionRecall {
        precision,
        recall,
        f_score: f_score(precision, recall),
    })
}

/// One generated-vs-real comparison, as written to report files.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub k: usize,
    pub extractor_id: String,
    pub n_real: usize,
    pub n_gen: usize,
}

impl MetricReport {
    pub fn compute(
        real: &FeatureSet,
        gen: &FeatureSet,
        k: usize,
    ) -> Result<Self, EvalError> {
        let fid_value = fid(real, gen)?;
        let pr = knn_precision_recall(real, gen, k)?;
        Ok(Self {
            fid: fid_value,
            precision: pr.precision,
            recall: pr.recall,
            f_score: pr.f_score,
            k,
            extractor_id: real.extractor_id.clone(),
            n_real: real.len(),
            n_gen: gen.len(),
        })
    }

    /// `key = value` lines, one per field.
    pub fn to_text(&self) -> String {
        format!(
            "fid = {}\nprecision = {}\nrecall = {}\nf_score = {}\nk = {}\nextractor_id = {}\nn_real = {}\nn_gen = {}\n",
            self.fid,
            self.precision,
            self.recall,
            self.f_score,
            self.k,
            self.extractor_id,
            self.n_real,
            self.n_gen
        )
    }

    pub fn csv_header() -> &'static str {
        "fid,precision,recall,f_score,k,extractor_id,n_real,n_gen"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.fid,
            self.precision,
            self.recall,
            self.f_score,
            self.k,
            self.extractor_id,
            self.n_real,
            self.n_gen
        )
    }
}
