//! Procedural generator of aligned multi-modal scenes, plus a loader for
//! real paired thumbnails.
//!
//! Every scene is a pure deterministic function of its seed: a power-law
//! heightfield synthesised in the frequency domain, from which four
//! co-registered modalities are rendered. The hazy optical pair is linked
//! near-deterministically (affine blend plus blur), the radar-like modality
//! shares geometry but carries multiplicative speckle (a one-to-many
//! mapping), and the hillshade is the most weakly coupled — mirroring the
//! correlation structure of the satellite products this stands in for.
//!
//! Directory layout for datasets on disk: `<root>/<modality>/<scene_id>.png`
//! with a `splits.txt` manifest of `scene_id,split` lines.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::derive_seed;

/// Spectral slope of the heightfield amplitude filter `1/f^2.2`.
const POWER_LAW_EXPONENT: f64 = 2.2;
/// Light direction for Lambert shading.
const LIGHT_AZIMUTH_DEG: f64 = 315.0;
const LIGHT_ALTITUDE_DEG: f64 = 45.0;
/// Vertical exaggeration of the unit-range heightfield, in pixels.
const RELIEF_SCALE: f64 = 0.35;
/// Haze: blend fraction toward white before the box blur.
const HAZE_BLEND: f32 = 0.35;
/// Speckle multiplier range for the radar-like modality.
const SPECKLE_MIN: f32 = 0.7;
const SPECKLE_MAX: f32 = 1.3;
/// Center-crop side used when ingesting real thumbnails.
const CROP_SIDE: u32 = 256;
/// Sub-stream ids for the per-scene rng.
const HEIGHT_STREAM: u64 = 1;
const SPECKLE_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("scene size must be a power of two >= 8, got {0}")]
    InvalidSize(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("unknown modality name {0}")]
    UnknownModality(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no scenes found under {0}")]
    EmptyDataset(PathBuf),
    #[error("image {0} has {1} channels; only 1 or 3 supported")]
    UnsupportedChannels(PathBuf, usize),
}

/// The four synthetic modalities, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    DemHillshade = 0,
    Optical = 1,
    RadarLike = 2,
    OpticalHazy = 3,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::DemHillshade,
        Modality::Optical,
        Modality::RadarLike,
        Modality::OpticalHazy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::DemHillshade => "dem_hillshade",
            Modality::Optical => "optical",
            Modality::RadarLike => "radar_like",
            Modality::OpticalHazy => "optical_hazy",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, DataError> {
        Modality::ALL
            .iter()
            .copied()
            .find(|m| m.name() == name)
            .ok_or_else(|| DataError::UnknownModality(name.to_string()))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One generated scene: the underlying heightfield and all four rendered
/// modalities as RGB images in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub seed: u64,
    pub heightfield: Array2<f32>,
    images: [Array3<f32>; 4],
}

impl Scene {
    pub fn rgb_image(&self, modality: Modality) -> &Array3<f32> {
        &self.images[modality.index()]
    }

    /// Luma conversion to a single-channel image.
    pub fn grayscale_image(&self, modality: Modality) -> Array3<f32> {
        to_grayscale(self.rgb_image(modality))
    }

    /// Image with the configured channel count (1 or 3).
    pub fn image_with_channels(&self, modality: Modality, channels: usize) -> Array3<f32> {
        match channels {
            1 => self.grayscale_image(modality),
            _ => self.rgb_image(modality).clone(),
        }
    }
}

pub fn to_grayscale(rgb: &Array3<f32>) -> Array3<f32> {
    let (_, h, w) = rgb.dim();
    Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        0.299 * rgb[[0, y, x]] + 0.587 * rgb[[1, y, x]] + 0.114 * rgb[[2, y, x]]
    })
}

// in-place radix-2 Cooley-Tukey over interleaved complex buffers
fn fft_1d(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    debug_assert!(n.is_power_of_two());
    // bit reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let angle = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (angle.cos(), angle.sin());
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ar, ai) = (re[i + k], im[i + k]);
                let (br, bi) = (re[i + k + len / 2], im[i + k + len / 2]);
                let (tr, ti) = (br * cr - bi * ci, br * ci + bi * cr);
                re[i + k] = ar + tr;
                im[i + k] = ai + ti;
                re[i + k + len / 2] = ar - tr;
                im[i + k + len / 2] = ai - ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
    if inverse {
        let inv = 1.0 / n as f64;
        for v in re.iter_mut() {
            *v *= inv;
        }
        for v in im.iter_mut() {
            *v *= inv;
        }
    }
}

fn fft_2d(re: &mut [f64], im: &mut [f64], n: usize, inverse: bool) {
    let mut row_re = vec![0.0; n];
    let mut row_im = vec![0.0; n];
    for y in 0..n {
        fft_1d(&mut re[y * n..(y + 1) * n], &mut im[y * n..(y + 1) * n], inverse);
    }
    for x in 0..n {
        for y in 0..n {
            row_re[y] = re[y * n + x];
            row_im[y] = im[y * n + x];
        }
        fft_1d(&mut row_re, &mut row_im, inverse);
        for y in 0..n {
            re[y * n + x] = row_re[y];
            im[y * n + x] = row_im[y];
        }
    }
}

/// Inverse spectral synthesis: white noise filtered by `1/f^2.2` in the
/// frequency domain, min-max normalised to `[0, 1]`.
fn heightfield(seed: u64, n: usize) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, HEIGHT_STREAM));
    let mut re: Vec<f64> = (0..n * n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let mut im = vec![0.0f64; n * n];
    fft_2d(&mut re, &mut im, n, false);
    for ky in 0..n {
        for kx in 0..n {
            let fy = ky.min(n - ky) as f64;
            let fx = kx.min(n - kx) as f64;
            let f = (fx * fx + fy * fy).sqrt();
            let gain = if f == 0.0 {
                0.0
            } else {
                1.0 / f.powf(POWER_LAW_EXPONENT)
            };
            re[ky * n + kx] *= gain;
            im[ky * n + kx] *= gain;
        }
    }
    fft_2d(&mut re, &mut im, n, true);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in re.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    Array2::from_shape_fn((n, n), |(y, x)| ((re[y * n + x] - lo) / span) as f32)
}

fn gradients(height: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = height.dim();
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        let right = height[[y, (x + 1).min(w - 1)]];
        let left = height[[y, x.saturating_sub(1)]];
        let denom = ((x + 1).min(w - 1) - x.saturating_sub(1)) as f32;
        if denom == 0.0 {
            0.0
        } else {
            (right - left) / denom
        }
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        let down = height[[(y + 1).min(h - 1), x]];
        let up = height[[y.saturating_sub(1), x]];
        let denom = ((y + 1).min(h - 1) - y.saturating_sub(1)) as f32;
        if denom == 0.0 {
            0.0
        } else {
            (down - up) / denom
        }
    });
    (gx, gy)
}

/// Lambert shading with a fixed light at azimuth 315 deg, altitude 45 deg.
fn hillshade(height: &Array2<f32>) -> Array2<f32> {
    let (h, w) = height.dim();
    let scale = (RELIEF_SCALE * h as f64) as f32;
    let az = LIGHT_AZIMUTH_DEG.to_radians();
    let alt = LIGHT_ALTITUDE_DEG.to_radians();
    // x east (columns), y south (rows); azimuth measured clockwise from north
    let light = [
        (az.sin() * alt.cos()) as f32,
        (-az.cos() * alt.cos()) as f32,
        alt.sin() as f32,
    ];
    let (gx, gy) = gradients(height);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let nx = -gx[[y, x]] * scale;
        let ny = gy[[y, x]] * scale;
        let norm = (nx * nx + ny * ny + 1.0).sqrt();
        ((nx * light[0] + ny * light[1] + light[2]) / norm).max(0.0)
    })
}

/// Fixed three-stop color ramp over height.
fn ramp(h: f32) -> [f32; 3] {
    const STOPS: [[f32; 3]; 3] = [
        [0.28, 0.38, 0.44], // low: water-dark blue
        [0.32, 0.46, 0.32], // mid: vegetation green
        [0.52, 0.55, 0.48], // high: pale rock
    ];
    let (a, b, t) = if h < 0.5 {
        (STOPS[0], STOPS[1], h * 2.0)
    } else {
        (STOPS[1], STOPS[2], (h - 0.5) * 2.0)
    };
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn box_blur_3x3(img: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let mut sum = 0.0f32;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                sum += img[[ch, yy, xx]];
            }
        }
        sum / 9.0
    })
}

/// Renders all four modalities from a heightfield. The speckle noise for
/// the radar-like image is drawn from the scene's seed stream, making the
/// radar rendering a one-to-many mapping of the geometry.
///
/// Exposed so degenerate heightfields (e.g. a forced constant) can be
/// rendered directly in tests.
pub fn render_modalities(height: &Array2<f32>, seed: u64) -> [Array3<f32>; 4] {
    let (h, w) = height.dim();
    let shade = hillshade(height);

    let dem = Array3::from_shape_fn((3, h, w), |(_, y, x)| shade[[y, x]]);

    let optical = Array3::from_shape_fn((3, h, w), |(ch, y, x)| {
        let color = ramp(height[[y, x]]);
        (color[ch] * (0.78 + 0.22 * shade[[y, x]])).clamp(0.0, 1.0)
    });

    let (gx, gy) = gradients(height);
    let mut grad_mag = Array2::from_shape_fn((h, w), |(y, x)| {
        let (a, b) = (gx[[y, x]], gy[[y, x]]);
        (a * a + b * b).sqrt()
    });
    let max_grad = grad_mag.iter().cloned().fold(0.0f32, f32::max);
    if max_grad > 0.0 {
        grad_mag.mapv_inplace(|v| (v / max_grad).sqrt());
    } else {
        // degenerate flat field: leave the full-scale base so the output is
        // pure speckle
        grad_mag.fill(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SPECKLE_STREAM));
    let mut radar = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let speckle = SPECKLE_MIN + (SPECKLE_MAX - SPECKLE_MIN) * rng.gen::<f32>();
            let v = (grad_mag[[y, x]] * speckle).clamp(0.0, 1.0);
            for ch in 0..3 {
                radar[[ch, y, x]] = v;
            }
        }
    }

    let blended = optical.mapv(|v| v * (1.0 - HAZE_BLEND) + HAZE_BLEND);
    let hazy = box_blur_3x3(&blended);

    [dem, optical, radar, hazy]
}

/// Generates one scene deterministically from its seed. `size` must be a
/// power of two >= 8.
pub fn generate_scene(seed: u64, size: usize) -> Result<Scene, DataError> {
    if size < 8 || !size.is_power_of_two() {
        return Err(DataError::InvalidSize(size));
    }
    let height = heightfield(seed, size);
    let images = render_modalities(&height, seed);
    Ok(Scene {
        seed,
        heightfield: height,
        images,
    })
}

/// Generates many scenes, parallel across seeds.
pub fn generate_scenes(seeds: &[u64], size: usize) -> Result<Vec<Scene>, DataError> {
    if size < 8 || !size.is_power_of_two() {
        return Err(DataError::InvalidSize(size));
    }
    Ok(crate::par::map_slice(seeds, |&s| {
        generate_scene(s, size).expect("size validated")
    }))
}

/// Disjoint train/test seed sets.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
}

/// Shuffles seeds `0..num_scenes` by `master_seed` and assigns the first
/// `floor(num_scenes * split_fraction)` to train, the rest to test.
pub fn make_dataset(
    num_scenes: usize,
    split_fraction: f64,
    master_seed: u64,
) -> Result<DatasetSplit, DataError> {
    if num_scenes < 2 {
        return Err(DataError::InvalidSplit(format!(
            "need at least 2 scenes, got {num_scenes}"
        )));
    }
    if !(0.0..1.0).contains(&split_fraction) || split_fraction == 0.0 {
        return Err(DataError::InvalidSplit(format!(
            "split fraction {split_fraction} outside (0, 1)"
        )));
    }
    let train_count = (num_scenes as f64 * split_fraction).floor() as usize;
    if train_count == 0 || train_count == num_scenes {
        return Err(DataError::InvalidSplit(format!(
            "split {split_fraction} leaves an empty subset for {num_scenes} scenes"
        )));
    }
    let mut seeds: Vec<u64> = (0..num_scenes as u64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    // Fisher-Yates
    for i in (1..seeds.len()).rev() {
        let j = rng.gen_range(0..=i);
        seeds.swap(i, j);
    }
    let test_seeds = seeds.split_off(train_count);
    Ok(DatasetSplit {
        train_seeds: seeds,
        test_seeds,
    })
}

/// Writes `scene_id,split` lines.
pub fn write_split_manifest(path: &Path, split: &DatasetSplit) -> Result<(), DataError> {
    let mut text = String::new();
    for s in &split.train_seeds {
        text.push_str(&format!("{s},train\n"));
    }
    for s in &split.test_seeds {
        text.push_str(&format!("{s},test\n"));
    }
    std::fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Saves an image (1 or 3 channels, values in `[0, 1]`) as an 8-bit PNG.
pub fn save_image_png(path: &Path, image: &Array3<f32>) -> Result<(), DataError> {
    let (c, h, w) = image.dim();
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let io_err = |source: std::io::Error| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    match c {
        1 => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                *p = image::Luma([quant(image[[0, y as usize, x as usize]])]);
            }
            buf.save(path)
                .map_err(|e| io_err(std::io::Error::other(e)))
        }
        3 => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                *p = image::Rgb([
                    quant(image[[0, y as usize, x as usize]]),
                    quant(image[[1, y as usize, x as usize]]),
                    quant(image[[2, y as usize, x as usize]]),
                ]);
            }
            buf.save(path)
                .map_err(|e| io_err(std::io::Error::other(e)))
        }
        _ => Err(DataError::UnsupportedChannels(path.to_path_buf(), c)),
    }
}

/// Decodes a PNG, center-crops to a square of at most 256 px (the thumbnail
/// crop convention), resizes to `size` and scales to `[0, 1]` RGB.
pub fn load_image_png(path: &Path, size: usize) -> Result<Array3<f32>, String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let (w, h) = (img.width(), img.height());
    let side = w.min(h).min(CROP_SIDE);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = cropped.resize_exact(
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let rgb = resized.to_rgb8();
    Ok(Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    }))
}

/// Aligned scenes loaded from `<root>/<modality>/<scene_id>.png`.
#[derive(Debug)]
pub struct PairedDataset {
    pub modalities: Vec<String>,
    /// `(scene_id, images in modality order)`, sorted by scene id.
    pub scenes: Vec<(String, Vec<Array3<f32>>)>,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub loaded: usize,
    /// Scenes skipped because a counterpart file was missing in some
    /// modality directory.
    pub missing_skipped: usize,
    /// Scenes dropped because a file failed to decode, with the reason.
    pub undecodable: Vec<(PathBuf, String)>,
}

/// Loads every scene present in all modality subdirectories, center-cropped
/// and resized to `size`.
pub fn load_paired_directory(
    root: &Path,
    modality_subdirs: &[String],
    size: usize,
) -> Result<(PairedDataset, LoadReport), DataError> {
    let mut stem_sets: Vec<std::collections::BTreeSet<String>> = Vec::new();
    for sub in modality_subdirs {
        let dir = root.join(sub);
        let mut stems = std::collections::BTreeSet::new();
        let entries = std::fs::read_dir(&dir).map_err(|source| DataError::Io {
            path: dir.clone(),
            source,
        })?;
        for entry in entries {
            let entry = entry.map_err(|source| DataError::Io {
                path: dir.clone(),
                source,
            })?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    stems.insert(stem.to_string());
                }
            }
        }
        stem_sets.push(stems);
    }
    let union: std::collections::BTreeSet<String> =
        stem_sets.iter().flatten().cloned().collect();
    let common: Vec<String> = union
        .iter()
        .filter(|s| stem_sets.iter().all(|set| set.contains(*s)))
        .cloned()
        .collect();
    let mut report = LoadReport {
        missing_skipped: union.len() - common.len(),
        ..LoadReport::default()
    };
    let mut scenes = Vec::with_capacity(common.len());
    'scene: for stem in &common {
        let mut images = Vec::with_capacity(modality_subdirs.len());
        for sub in modality_subdirs {
            let path = root.join(sub).join(format!("{stem}.png"));
            match load_image_png(&path, size) {
                Ok(img) => images.push(img),
                Err(msg) => {
                    report.undecodable.push((path, msg));
                    continue 'scene;
                }
            }
        }
        scenes.push((stem.clone(), images));
    }
    if scenes.is_empty() {
        return Err(DataError::EmptyDataset(root.to_path_buf()));
    }
    report.loaded = scenes.len();
    Ok((
        PairedDataset {
            modalities: modality_subdirs.to_vec(),
            scenes,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 16;
        let orig: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut re = orig.clone();
        let mut im = vec![0.0; n * n];
        fft_2d(&mut re, &mut im, n, false);
        fft_2d(&mut re, &mut im, n, true);
        for (a, b) in re.iter().zip(orig.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for &v in &im {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = generate_scene(42, 16).unwrap();
        let b = generate_scene(42, 16).unwrap();
        assert_eq!(a.heightfield, b.heightfield);
        for m in Modality::ALL {
            assert_eq!(a.rgb_image(m), b.rgb_image(m));
        }
        let c = generate_scene(43, 16).unwrap();
        assert_ne!(a.heightfield, c.heightfield);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(matches!(generate_scene(0, 7), Err(DataError::InvalidSize(7))));
        assert!(matches!(
            generate_scene(0, 12),
            Err(DataError::InvalidSize(12))
        ));
        assert!(generate_scene(0, 8).is_ok());
    }

    #[test]
    fn values_stay_in_unit_range() {
        for seed in 0..8 {
            let scene = generate_scene(seed, 16).unwrap();
            for m in Modality::ALL {
                for &v in scene.rgb_image(m).iter() {
                    assert!((0.0..=1.0).contains(&v), "{m:?}: {v}");
                }
            }
            for &v in scene.heightfield.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn flat_heightfield_degenerates_analytically() {
        let height = Array2::from_elem((16, 16), 0.4f32);
        let [dem, _, radar, _] = render_modalities(&height, 5);
        // constant field: all normals point up, shading is uniform
        let first = dem[[0, 0, 0]];
        assert!(dem.iter().all(|&v| (v - first).abs() < 1e-6));
        // zero gradient leaves pure (clamped) speckle
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(5, SPECKLE_STREAM));
        for y in 0..16 {
            for x in 0..16 {
                let speckle =
                    SPECKLE_MIN + (SPECKLE_MAX - SPECKLE_MIN) * rng.gen::<f32>();
                let expect = speckle.clamp(0.0, 1.0);
                assert!((radar[[0, y, x]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn haze_inverts_up_to_blur() {
        // the affine deblend recovers the blurred optical exactly, so the
        // residual against the sharp optical is only the blur difference
        let scene = generate_scene(7, 16).unwrap();
        let optical = scene.rgb_image(Modality::Optical);
        let hazy = scene.rgb_image(Modality::OpticalHazy);
        let deblended = hazy.mapv(|v| (v - HAZE_BLEND) / (1.0 - HAZE_BLEND));
        for (a, b) in deblended.iter().zip(optical.iter()) {
            assert!((a - b).abs() < 0.1, "residual too large: {a} vs {b}");
        }
        let blurred = box_blur_3x3(optical);
        for (a, b) in deblended.iter().zip(blurred.iter()) {
            assert!((a - b).abs() < 1e-5, "deblend must equal blurred optical");
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let split = make_dataset(100, 0.95, 1).unwrap();
        assert_eq!(split.train_seeds.len(), 95);
        assert_eq!(split.test_seeds.len(), 5);
        let train: std::collections::HashSet<_> = split.train_seeds.iter().collect();
        assert!(split.test_seeds.iter().all(|s| !train.contains(s)));
        // deterministic in the master seed
        let again = make_dataset(100, 0.95, 1).unwrap();
        assert_eq!(split.train_seeds, again.train_seeds);
        let other = make_dataset(100, 0.95, 2).unwrap();
        assert_ne!(split.train_seeds, other.train_seeds);
    }

    #[test]
    fn split_matches_reference_tile_counts() {
        let split = make_dataset(1_015_438, 0.95, 0).unwrap();
        assert_eq!(split.train_seeds.len(), 964_666);
        assert_eq!(split.test_seeds.len(), 50_772);
    }

    #[test]
    fn split_rejects_degenerate_cases() {
        assert!(make_dataset(1, 0.5, 0).is_err());
        assert!(make_dataset(10, 0.0, 0).is_err());
        assert!(make_dataset(10, 1.0, 0).is_err());
        assert!(make_dataset(10, 0.05, 0).is_err()); // empty train
    }

    #[test]
    fn paired_loader_intersects_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mods = ["a".to_string(), "b".to_string()];
        for m in &mods {
            std::fs::create_dir(root.join(m)).unwrap();
        }
        let img = Array3::from_elem((3, 8, 8), 0.5f32);
        save_image_png(&root.join("a/s0.png"), &img).unwrap();
        save_image_png(&root.join("b/s0.png"), &img).unwrap();
        save_image_png(&root.join("a/s1.png"), &img).unwrap(); // missing in b
        save_image_png(&root.join("a/s2.png"), &img).unwrap();
        std::fs::write(root.join("b/s2.png"), b"not a png").unwrap();

        let (dataset, report) = load_paired_directory(root, &mods, 8).unwrap();
        assert_eq!(dataset.scenes.len(), 1);
        assert_eq!(dataset.scenes[0].0, "s0");
        assert_eq!(report.missing_skipped, 1);
        assert_eq!(report.undecodable.len(), 1);
        assert!(report.undecodable[0].0.ends_with("b/s2.png"));
    }

    #[test]
    fn loader_center_crops_before_resizing() {
        // 300x300 image: red ring outside the central 256-square, blue inside.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.png");
        let img = Array3::from_shape_fn((3, 300, 300), |(c, y, x)| {
            let inside = (22..278).contains(&y) && (22..278).contains(&x);
            match (inside, c) {
                (true, 2) => 1.0,
                (true, _) => 0.0,
                (false, 0) => 1.0,
                (false, _) => 0.0,
            }
        });
        save_image_png(&path, &img).unwrap();
        let loaded = load_image_png(&path, 16).unwrap();
        // all pixels must come from the blue center
        for y in 0..16 {
            for x in 0..16 {
                assert!(loaded[[2, y, x]] > 0.9, "not blue at {y},{x}");
                assert!(loaded[[0, y, x]] < 0.1, "red leaked at {y},{x}");
            }
        }
    }

    #[test]
    fn png_round_trip_is_exact_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        let scene = generate_scene(3, 16).unwrap();
        let img = scene.rgb_image(Modality::Optical);
        save_image_png(&path, img).unwrap();
        let loaded = load_image_png(&path, 16).unwrap();
        for (a, b) in loaded.iter().zip(img.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn modality_names_round_trip() {
        for m in Modality::ALL {
            assert_eq!(Modality::from_name(m.name()).unwrap(), m);
        }
        assert!(Modality::from_name("nope").is_err());
    }
}
