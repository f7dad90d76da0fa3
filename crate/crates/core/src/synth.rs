//! Synthetic copper-surface datasets with known ground truth.
//!
//! Each sample is a binary mask with a controlled area ratio `f_true(t)`,
//! rendered as a grayscale image in which masked ("rough") pixels carry
//! high-frequency texture and the rest carry low-frequency texture at the
//! same mean brightness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hypothesis::{Family, Hypothesis};
use crate::io;
use crate::pnm::{self, GrayImage};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn key(self) -> u64 {
        self as u64
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Thresholded smooth field: spatially coherent regions.
    Blob,
    /// Independent per-pixel draws.
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureParams {
    /// Blur passes for the rough (mask = 1) texture; fewer means higher frequency.
    pub rough_passes: usize,
    /// Blur passes for the smooth (mask = 0) texture.
    pub smooth_passes: usize,
    /// Standard deviation of each texture around 0.5.
    pub amplitude: f64,
    /// Standard deviation of additive Gaussian observation noise.
    pub noise: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            rough_passes: 0,
            smooth_passes: 4,
            amplitude: 0.15,
            noise: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub label_range: (i64, i64),
    /// Samples per label in each split.
    pub counts: SplitCounts,
    pub height: usize,
    pub width: usize,
    pub f_true: Family,
    pub mask_mode: MaskMode,
    /// Blur passes of the field thresholded into a blob mask.
    pub blob_passes: usize,
    pub texture: TextureParams,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            label_range: (0, 7),
            counts: SplitCounts {
                train: 40,
                val: 5,
                test: 5,
            },
            height: 64,
            width: 64,
            f_true: Family::Linear,
            mask_mode: MaskMode::Blob,
            blob_passes: 10,
            texture: TextureParams::default(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn f_true(&self) -> Result<Hypothesis> {
        Hypothesis::new(self.f_true.to_string(), self.f_true.clone(), self.label_range)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::SpatialTooSmall(self.height.min(self.width)));
        }
        let t = &self.texture;
        if !(t.amplitude.is_finite() && t.amplitude >= 0.0 && t.noise.is_finite() && t.noise >= 0.0) {
            return Err(Error::Invalid("texture amplitude and noise must be finite and >= 0".into()));
        }
        self.f_true().map(|_| ())
    }

    /// Seed of the sample at `(label, split, index)`.
    pub fn sample_seed(&self, label: i64, split: Split, index: usize) -> u64 {
        derive_seed(self.seed, &[label as u64, split.key(), index as u64])
    }
}

/// One generated sample. `image` is already quantized to 8 bits so it equals
/// what is read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSample {
    pub image: Vec<f64>,
    /// 0/1 per pixel.
    pub mask: Vec<u8>,
    pub label: i64,
    pub true_ratio: f64,
    pub seed: u64,
    pub split: Split,
    pub index: usize,
}

/// Uniform noise smoothed by `passes` separable 3-tap box blurs with
/// clamped borders.
pub fn smooth_field(height: usize, width: usize, seed: u64, passes: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut field: Vec<f64> = (0..height * width).map(|_| rng.next_f64()).collect();
    let mut tmp = vec![0.0; field.len()];
    for _ in 0..passes {
        box_blur(&mut field, &mut tmp, height, width);
    }
    field
}

fn box_blur(field: &mut [f64], tmp: &mut [f64], height: usize, width: usize) {
    for y in 0..height {
        let row = &field[y * width..(y + 1) * width];
        for x in 0..width {
            let l = row[x.saturating_sub(1)];
            let r = row[(x + 1).min(width - 1)];
            tmp[y * width + x] = (l + row[x] + r) / 3.0;
        }
    }
    for y in 0..height {
        let up = y.saturating_sub(1) * width;
        let down = (y + 1).min(height - 1) * width;
        for x in 0..width {
            field[y * width + x] = (tmp[up + x] + tmp[y * width + x] + tmp[down + x]) / 3.0;
        }
    }
}

/// Sets exactly `ceil(r * len)` entries to 1: the largest ones, with ties
/// going to the lower row-major index.
pub fn threshold_at_ratio(field: &[f64], r: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::TargetOutOfRange(r));
    }
    let n = field.len();
    // The epsilon keeps products like 0.3 * 100 = 30.000000000000004 at 30.
    let k = ((r * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut mask = vec![0u8; n];
    for &i in &order[..k] {
        mask[i] = 1;
    }
    Ok(mask)
}

pub fn bernoulli_mask(height: usize, width: usize, r: f64, seed: u64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::TargetOutOfRange(r));
    }
    let mut rng = SplitMix64::new(seed);
    Ok((0..height * width).map(|_| u8::from(rng.next_f64() < r)).collect())
}

fn standardize(v: &mut [f64], amplitude: f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { amplitude / var.sqrt() } else { 0.0 };
    for x in v.iter_mut() {
        *x = 0.5 + (*x - mean) * scale;
    }
}

/// Renders `mask` (row-major, `height x width`) as a gray image in `[0, 1]`.
pub fn render_texture(mask: &[u8], height: usize, width: usize, seed: u64, params: &TextureParams) -> Result<Vec<f64>> {
    if mask.len() != height * width {
        return Err(Error::ValueCount {
            expected: height * width,
            actual: mask.len(),
        });
    }
    let mut rough = smooth_field(height, width, derive_seed(seed, &[1]), params.rough_passes);
    let mut smooth = smooth_field(height, width, derive_seed(seed, &[2]), params.smooth_passes);
    standardize(&mut rough, params.amplitude);
    standardize(&mut smooth, params.amplitude);
    let mut noise = SplitMix64::new(derive_seed(seed, &[3]));
    Ok(mask
        .iter()
        .zip(rough.iter().zip(&smooth))
        .map(|(&m, (&r, &s))| {
            let v = if m == 1 { r } else { s };
            (v + params.noise * noise.next_normal()).clamp(0.0, 1.0)
        })
        .collect())
}

/// Generates the sample at `(label, split, index)` in isolation.
pub fn generate_sample(config: &DatasetConfig, label: i64, split: Split, index: usize) -> Result<SurfaceSample> {
    let f_true = config.f_true()?;
    let ratio = f_true.g(label)?;
    let (h, w) = (config.height, config.width);
    let seed = config.sample_seed(label, split, index);
    let mask_seed = derive_seed(seed, &[0]);
    let mask = match config.mask_mode {
        MaskMode::Blob => threshold_at_ratio(&smooth_field(h, w, mask_seed, config.blob_passes), ratio)?,
        MaskMode::Bernoulli => bernoulli_mask(h, w, ratio, mask_seed)?,
    };
    let image = render_texture(&mask, h, w, seed, &config.texture)?
        .into_iter()
        .map(|v| pnm::quantize(v) as f64 / 255.0)
        .collect();
    let true_ratio = mask.iter().map(|&m| m as f64).sum::<f64>() / (h * w) as f64;
    Ok(SurfaceSample {
        image,
        mask,
        label,
        true_ratio,
        seed,
        split,
        index,
    })
}

/// All samples in manifest order: split, then label, then index.
pub fn generate_samples(config: &DatasetConfig) -> Result<Vec<SurfaceSample>> {
    config.validate()?;
    let mut out = Vec::new();
    for split in Split::ALL {
        for label in config.label_range.0..=config.label_range.1 {
            for index in 0..config.counts.get(split) {
                out.push(generate_sample(config, label, split, index)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub mask: String,
    pub label: i64,
    pub split: Split,
    pub index: usize,
    pub true_ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the serialized manifest.
    pub fn checksum(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn relative_paths(s: &SurfaceSample) -> (String, String) {
    let file = format!("{}_{}.pgm", s.label, s.index);
    (
        format!("images/{}/{file}", s.split),
        format!("masks/{}/{file}", s.split),
    )
}

/// Writes images, masks and `manifest.json` under `out`.
pub fn generate_dataset(config: &DatasetConfig, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    let samples = generate_samples(config)?;
    for split in Split::ALL {
        io::create_dir_all(out.join("images").join(split.name()))?;
        io::create_dir_all(out.join("masks").join(split.name()))?;
    }
    let (h, w) = (config.height, config.width);
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let (image, mask) = relative_paths(s);
        pnm::write_pgm(out.join(&image), &GrayImage::new(w, h, s.image.clone())?)?;
        let mask_values = s.mask.iter().map(|&m| m as f64).collect();
        pnm::write_pgm(out.join(&mask), &GrayImage::new(w, h, mask_values)?)?;
        records.push(SampleRecord {
            image,
            mask,
            label: s.label,
            split: s.split,
            index: s.index,
            true_ratio: s.true_ratio,
            seed: s.seed,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config: config.clone(),
        samples: records,
    };
    io::write_text(out.join("manifest.json"), &manifest.to_json())?;
    Ok(manifest)
}

/// Samples held in memory, grouped by split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    samples: Vec<SurfaceSample>,
    root: Option<PathBuf>,
}

impl Dataset {
    pub fn from_samples(config: DatasetConfig, samples: Vec<SurfaceSample>) -> Result<Self> {
        let len = config.height * config.width;
        if let Some(s) = samples.iter().find(|s| s.image.len() != len || s.mask.len() != len) {
            return Err(Error::ValueCount {
                expected: len,
                actual: s.image.len(),
            });
        }
        Ok(Self {
            config,
            samples,
            root: None,
        })
    }

    /// Generates in memory without touching the filesystem.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        Self::from_samples(config.clone(), generate_samples(config)?)
    }

    /// Loads a directory written by [`generate_dataset`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = io::read_json(dir.join("manifest.json"))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Invalid(format!(
                "manifest format version {} (expected {MANIFEST_VERSION})",
                manifest.format_version
            )));
        }
        let cfg = &manifest.config;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for r in &manifest.samples {
            let image = pnm::read_pgm(dir.join(&r.image))?;
            let mask = pnm::read_pgm(dir.join(&r.mask))?;
            for img in [&image, &mask] {
                if (img.height, img.width) != (cfg.height, cfg.width) {
                    return Err(Error::ShapeMismatch(
                        vec![cfg.height, cfg.width],
                        vec![img.height, img.width],
                    ));
                }
            }
            samples.push(SurfaceSample {
                image: image.data,
                mask: mask.data.iter().map(|&v| u8::from(v >= 0.5)).collect(),
                label: r.label,
                true_ratio: r.true_ratio,
                seed: r.seed,
                split: r.split,
                index: r.index,
            });
        }
        let mut ds = Self::from_samples(manifest.config, samples)?;
        ds.root = Some(dir.to_path_buf());
        Ok(ds)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn samples(&self) -> &[SurfaceSample] {
        &self.samples
    }

    pub fn split(&self, split: Split) -> Vec<&SurfaceSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn f_true(&self) -> Result<Hypothesis> {
        self.config.f_true()
    }

    pub fn label_count(&self) -> usize {
        (self.config.label_range.1 - self.config.label_range.0 + 1) as usize
    }

    /// Stacks sample images into a `[B, 1, H, W]` tensor.
    pub fn batch_tensor(&self, samples: &[&SurfaceSample]) -> Result<Tensor> {
        let (h, w) = (self.config.height, self.config.width);
        let mut data = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            data.extend_from_slice(&s.image);
        }
        Tensor::from_vec(&[samples.len(), 1, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn variance(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
    }

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            counts: SplitCounts {
                train: 2,
                val: 1,
                test: 1,
            },
            height: 16,
            width: 16,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn zero_passes_is_raw_noise() {
        let f = smooth_field(5, 6, 11, 0);
        let mut rng = SplitMix64::new(11);
        let raw: Vec<f64> = (0..30).map(|_| rng.next_f64()).collect();
        assert_eq!(f, raw);
    }

    #[test]
    fn blur_preserves_constants() {
        let mut f = vec![0.375; 7 * 5];
        let mut tmp = vec![0.0; f.len()];
        for _ in 0..4 {
            box_blur(&mut f, &mut tmp, 7, 5);
        }
        assert!(f.iter().all(|&v| v == 0.375));
    }

    #[test]
    fn blur_matches_direct_3x3_average() {
        let mut f = smooth_field(6, 5, 3, 0);
        let orig = f.clone();
        let mut tmp = vec![0.0; f.len()];
        box_blur(&mut f, &mut tmp, 6, 5);
        for y in 0..6i64 {
            for x in 0..5i64 {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let yy = (y + dy).clamp(0, 5) as usize;
                        let xx = (x + dx).clamp(0, 4) as usize;
                        acc += orig[yy * 5 + xx];
                    }
                }
                assert!((f[y as usize * 5 + x as usize] - acc / 9.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn variance_decreases_with_passes() {
        for seed in 0..100 {
            let vars: Vec<f64> = (0..5).map(|p| variance(&smooth_field(16, 16, seed, p))).collect();
            assert!(vars.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {vars:?}");
        }
    }

    #[test]
    fn threshold_extremes_and_counts() {
        let field: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64).collect();
        assert!(threshold_at_ratio(&field, 0.0).unwrap().iter().all(|&m| m == 0));
        assert!(threshold_at_ratio(&field, 1.0).unwrap().iter().all(|&m| m == 1));
        let half = threshold_at_ratio(&field, 0.5).unwrap();
        assert_eq!(half.iter().filter(|&&m| m == 1).count(), 32);
        for (i, &m) in half.iter().enumerate() {
            assert_eq!(m == 1, field[i] >= 32.0);
        }
    }

    #[test]
    fn threshold_ties_break_row_major() {
        let mask = threshold_at_ratio(&[1.0; 4], 0.5).unwrap();
        assert_eq!(mask, vec![1, 1, 0, 0]);
    }

    #[test]
    fn threshold_rejects_bad_ratio() {
        assert!(threshold_at_ratio(&[0.0; 4], 1.5).is_err());
        assert!(bernoulli_mask(2, 2, -0.1, 0).is_err());
    }

    #[test]
    fn bernoulli_extremes_and_concentration() {
        assert!(bernoulli_mask(8, 8, 0.0, 1).unwrap().iter().all(|&m| m == 0));
        assert!(bernoulli_mask(8, 8, 1.0, 1).unwrap().iter().all(|&m| m == 1));
        let m = bernoulli_mask(128, 128, 0.3, 5).unwrap();
        let mean = m.iter().map(|&v| v as f64).sum::<f64>() / m.len() as f64;
        assert!((mean - 0.3).abs() < 0.02, "{mean}");
    }

    #[test]
    fn bernoulli_is_stationary_across_quadrants() {
        let n = 256;
        let r = 0.4;
        let m = bernoulli_mask(n, n, r, 9).unwrap();
        let half = n / 2;
        let quad = |qy: usize, qx: usize| {
            let mut s = 0.0;
            for y in qy * half..(qy + 1) * half {
                for x in qx * half..(qx + 1) * half {
                    s += m[y * n + x] as f64;
                }
            }
            s / (half * half) as f64
        };
        let means = [quad(0, 0), quad(0, 1), quad(1, 0), quad(1, 1)];
        let se = (r * (1.0 - r) / (half * half) as f64).sqrt();
        for a in means {
            for b in means {
                assert!((a - b).abs() < 5.0 * se);
            }
        }
    }

    #[test]
    fn texture_is_deterministic_and_brightness_balanced() {
        let params = TextureParams::default();
        let mut diffs = 0.0;
        for seed in 0..100 {
            let mask = threshold_at_ratio(&smooth_field(32, 32, seed, 8), 0.5).unwrap();
            let img = render_texture(&mask, 32, 32, seed, &params).unwrap();
            assert_eq!(img, render_texture(&mask, 32, 32, seed, &params).unwrap());
            let mean_where = |want: u8| {
                let v: Vec<f64> = img.iter().zip(&mask).filter(|(_, &m)| m == want).map(|(&p, _)| p).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            diffs += mean_where(1) - mean_where(0);
        }
        assert!((diffs / 100.0).abs() < 0.02, "{}", diffs / 100.0);
    }

    #[test]
    fn all_one_mask_is_pure_rough_texture() {
        let params = TextureParams {
            noise: 0.0,
            ..TextureParams::default()
        };
        let img = render_texture(&[1; 64], 8, 8, 4, &params).unwrap();
        let mut rough = smooth_field(8, 8, derive_seed(4, &[1]), params.rough_passes);
        standardize(&mut rough, params.amplitude);
        let clamped: Vec<f64> = rough.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        assert_eq!(img, clamped);
    }

    #[test]
    fn rough_regions_have_larger_local_differences() {
        let params = TextureParams::default();
        let img_r = render_texture(&[1; 1024], 32, 32, 1, &params).unwrap();
        let img_s = render_texture(&[0; 1024], 32, 32, 1, &params).unwrap();
        let tv = |v: &[f64]| v.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
        assert!(tv(&img_r) > 2.0 * tv(&img_s));
    }

    #[test]
    fn blob_ratio_is_exact() {
        let cfg = small_config();
        let f = cfg.f_true().unwrap();
        for s in generate_samples(&cfg).unwrap() {
            let k = (f.g(s.label).unwrap() * 256.0 - 1e-9).ceil() / 256.0;
            assert_eq!(s.true_ratio, k);
            assert!((s.true_ratio - f.g(s.label).unwrap()).abs() <= 1.0 / 256.0);
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn single_sample_regenerates_in_isolation() {
        let cfg = small_config();
        let all = generate_samples(&cfg).unwrap();
        let s = &all[5];
        assert_eq!(&generate_sample(&cfg, s.label, s.split, s.index).unwrap(), s);
    }

    #[test]
    fn out_of_range_f_true_rejected() {
        let cfg = DatasetConfig {
            f_true: Family::Constant { value: 2.0 },
            ..small_config()
        };
        assert!(generate_samples(&cfg).is_err());
    }

    #[test]
    fn written_dataset_loads_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let manifest = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 8 * 4);
        let loaded = Dataset::load(dir.path()).unwrap();
        let fresh = Dataset::generate(&cfg).unwrap();
        assert_eq!(loaded.samples(), fresh.samples());
        assert!(dir.path().join("images/val/3_0.pgm").exists());
        assert!(dir.path().join("masks/train/7_1.pgm").exists());
        let again = tempfile::tempdir().unwrap();
        assert_eq!(generate_dataset(&cfg, again.path()).unwrap().checksum(), manifest.checksum());
    }
}
