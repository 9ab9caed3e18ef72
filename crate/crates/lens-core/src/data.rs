//! Synthetic dataset harness: template-plus-noise image generation with a
//! disjoint out-of-distribution companion set, severity-graded corruptions,
//! and the LDS1 dataset file format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::atomic_write;
use crate::rng::{derive, SplitMix64};

const MAGIC: &[u8; 4] = b"LDS1";
const FORMAT_VERSION: u32 = 1;

/// Stream tags separating template, split, and corruption randomness.
const STREAM_TEMPLATE: u64 = 0x7E4D;
const STREAM_TRAIN: u64 = 0x5A11;
const STREAM_TEST: u64 = 0x5A12;
const STREAM_OOD: u64 = 0x00D;
const STREAM_CORRUPT: u64 = 0xC0E7;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("data config: {0}")]
    Invalid(String),
}

/// Generator settings. Each class draws one fixed template image from the
/// template seed; samples add Gaussian pixel noise. The OOD companion uses
/// a different template seed, so its class prototypes are unrelated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub template_seed: u64,
    pub noise_std: f64,
    pub ood_template_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 5,
            image_size: 16,
            channels: 1,
            train_samples: 2000,
            test_samples: 500,
            template_seed: 7,
            noise_std: 0.1,
            ood_template_seed: 8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::Invalid("need at least 2 classes".into()));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(DataError::Invalid("image geometry must be nonzero".into()));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(DataError::Invalid("splits must be non-empty".into()));
        }
        if self.template_seed == self.ood_template_seed {
            return Err(DataError::Invalid(
                "in-distribution and OOD template seeds must differ".into(),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(DataError::Invalid(format!(
                "noise_std must be finite and nonnegative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// In-memory dataset with row-major images in `[count * pixels]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }
}

/// Fixed per-class template images drawn uniformly from [0, 1].
pub fn class_templates(spec: &SyntheticSpec, template_seed: u64) -> Vec<Vec<f32>> {
    (0..spec.num_classes)
        .map(|c| {
            let mut rng = SplitMix64::new(derive(derive(template_seed, STREAM_TEMPLATE), c as u64));
            (0..spec.pixels()).map(|_| rng.uniform(0.0, 1.0) as f32).collect()
        })
        .collect()
}

fn generate(
    spec: &SyntheticSpec,
    templates: &[Vec<f32>],
    count: usize,
    stream: u64,
    seed: u64,
) -> Dataset {
    let mut rng = SplitMix64::new(derive(seed, stream));
    let pixels = spec.pixels();
    let mut images = Vec::with_capacity(count * pixels);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let c = i % spec.num_classes;
        labels.push(c);
        images.extend(
            templates[c]
                .iter()
                .map(|&t| t + (rng.normal() * spec.noise_std) as f32),
        );
    }
    Dataset {
        images,
        labels,
        image_size: spec.image_size,
        channels: spec.channels,
        num_classes: spec.num_classes,
    }
}

/// Generates one in-distribution split. Bitwise deterministic per
/// (spec, split, seed); train and test draw from disjoint noise streams.
pub fn gen_synthetic(spec: &SyntheticSpec, split: Split, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let templates = class_templates(spec, spec.template_seed);
    let (count, stream) = match split {
        Split::Train => (spec.train_samples, STREAM_TRAIN),
        Split::Test => (spec.test_samples, STREAM_TEST),
    };
    Ok(generate(spec, &templates, count, stream, seed))
}

/// Generates the out-of-distribution companion set: same geometry and
/// sample count as the test split, but templates from the disjoint OOD
/// template seed.
pub fn gen_ood(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let templates = class_templates(spec, spec.ood_template_seed);
    Ok(generate(spec, &templates, spec.test_samples, STREAM_OOD, seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    Contrast,
    PixelDropout,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Blur,
        CorruptionKind::Contrast,
        CorruptionKind::PixelDropout,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::PixelDropout => "pixel_dropout",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::Invalid(format!("unknown corruption kind '{s}'")))
    }
}

/// Corruption magnitudes per severity 1..=5. Severity 0 is the identity.
///
/// | kind           | 1    | 2    | 3    | 4    | 5    | meaning                |
/// |----------------|------|------|------|------|------|------------------------|
/// | gaussian_noise | 0.05 | 0.10 | 0.20 | 0.35 | 0.50 | added noise std        |
/// | blur           | 1    | 2    | 3    | 4    | 5    | 3x3 box filter passes  |
/// | contrast       | 0.80 | 0.65 | 0.50 | 0.35 | 0.20 | contrast factor        |
/// | pixel_dropout  | 0.05 | 0.10 | 0.20 | 0.35 | 0.50 | zeroed pixel fraction  |
const NOISE_STD: [f64; 5] = [0.05, 0.10, 0.20, 0.35, 0.50];
const BLUR_PASSES: [usize; 5] = [1, 2, 3, 4, 5];
const CONTRAST_FACTOR: [f64; 5] = [0.80, 0.65, 0.50, 0.35, 0.20];
const DROPOUT_FRACTION: [f64; 5] = [0.05, 0.10, 0.20, 0.35, 0.50];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.severity > 5 {
            return Err(DataError::Invalid(format!(
                "severity must be 0..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }
}

/// Applies one corruption to every image. Stochastic kinds draw from the
/// seed, so repeated calls reproduce the same shift.
pub fn corrupt(dataset: &Dataset, spec: &CorruptionSpec, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    if spec.severity == 0 {
        return Ok(dataset.clone());
    }
    let level = (spec.severity - 1) as usize;
    let mut out = dataset.clone();
    let mut rng = SplitMix64::new(derive(derive(seed, STREAM_CORRUPT), spec.severity as u64));
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let std = NOISE_STD[level];
            for x in out.images.iter_mut() {
                *x += (rng.normal() * std) as f32;
            }
        }
        CorruptionKind::Blur => {
            let pixels = dataset.pixels();
            for i in 0..dataset.len() {
                let start = i * pixels;
                let blurred = box_blur(
                    &out.images[start..start + pixels],
                    dataset.image_size,
                    dataset.channels,
                    BLUR_PASSES[level],
                );
                out.images[start..start + pixels].copy_from_slice(&blurred);
            }
        }
        CorruptionKind::Contrast => {
            let factor = CONTRAST_FACTOR[level] as f32;
            let pixels = dataset.pixels();
            for img in out.images.chunks_exact_mut(pixels) {
                let mean: f32 = img.iter().sum::<f32>() / pixels as f32;
                for x in img.iter_mut() {
                    *x = mean + factor * (*x - mean);
                }
            }
        }
        CorruptionKind::PixelDropout => {
            let fraction = DROPOUT_FRACTION[level];
            for x in out.images.iter_mut() {
                if rng.uniform(0.0, 1.0) < fraction {
                    *x = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Repeated 3x3 box filter with clamped borders, applied per channel.
fn box_blur(image: &[f32], size: usize, channels: usize, passes: usize) -> Vec<f32> {
    let mut current = image.to_vec();
    let mut next = vec![0.0f32; image.len()];
    let idx = |r: usize, c: usize, ch: usize| (r * size + c) * channels + ch;
    for _ in 0..passes {
        for r in 0..size {
            for c in 0..size {
                for ch in 0..channels {
                    let mut sum = 0.0f32;
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let rr = (r as i64 + dr).clamp(0, size as i64 - 1) as usize;
                            let cc = (c as i64 + dc).clamp(0, size as i64 - 1) as usize;
                            sum += current[idx(rr, cc, ch)];
                        }
                    }
                    next[idx(r, c, ch)] = sum / 9.0;
                }
            }
        }
        std::mem::swap(&mut current, &mut next);
    }
    current
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn take_u32(bytes: &[u8], at: &mut usize) -> Result<u32, DataError> {
    let end = *at + 4;
    if end > bytes.len() {
        return Err(DataError::Format("truncated header".into()));
    }
    let v = u32::from_le_bytes(bytes[*at..end].try_into().expect("4 bytes"));
    *at = end;
    Ok(v)
}

/// Serializes a dataset: magic "LDS1", u32 version, u32 count, u32 height,
/// u32 width, u32 channels, u32 classes, images as little-endian f32, then
/// labels as little-endian u16.
pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>, DataError> {
    if dataset.labels.len() * dataset.pixels() != dataset.images.len() {
        return Err(DataError::Invalid(format!(
            "{} labels do not match {} image values",
            dataset.labels.len(),
            dataset.images.len()
        )));
    }
    if dataset.labels.iter().any(|&y| y >= dataset.num_classes || y > u16::MAX as usize) {
        return Err(DataError::Invalid("label out of range".into()));
    }
    let mut buf = Vec::with_capacity(28 + dataset.images.len() * 4 + dataset.labels.len() * 2);
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    push_u32(&mut buf, dataset.len() as u32);
    push_u32(&mut buf, dataset.image_size as u32);
    push_u32(&mut buf, dataset.image_size as u32);
    push_u32(&mut buf, dataset.channels as u32);
    push_u32(&mut buf, dataset.num_classes as u32);
    for &x in &dataset.images {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for &y in &dataset.labels {
        buf.extend_from_slice(&(y as u16).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    if bytes.len() < 28 {
        return Err(DataError::Format("file shorter than header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::Format("bad magic, expected LDS1".into()));
    }
    let mut at = 4;
    let version = take_u32(bytes, &mut at)?;
    if version != FORMAT_VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let count = take_u32(bytes, &mut at)? as usize;
    let height = take_u32(bytes, &mut at)? as usize;
    let width = take_u32(bytes, &mut at)? as usize;
    let channels = take_u32(bytes, &mut at)? as usize;
    let classes = take_u32(bytes, &mut at)? as usize;
    if height != width {
        return Err(DataError::Format(format!(
            "only square images are supported, got {height}x{width}"
        )));
    }
    let pixels = height * width * channels;
    let expect = at + count * pixels * 4 + count * 2;
    if bytes.len() != expect {
        return Err(DataError::Format(format!(
            "file has {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(count * pixels);
    for _ in 0..count * pixels {
        let end = at + 4;
        images.push(f32::from_le_bytes(bytes[at..end].try_into().expect("4 bytes")));
        at = end;
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let end = at + 2;
        let y = u16::from_le_bytes(bytes[at..end].try_into().expect("2 bytes")) as usize;
        if y >= classes {
            return Err(DataError::Format(format!("label {y} out of range for {classes} classes")));
        }
        labels.push(y);
        at = end;
    }
    Ok(Dataset { images, labels, image_size: height, channels, num_classes: classes })
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let bytes = encode_dataset(dataset)?;
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path)?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec { train_samples: 100, test_samples: 50, ..SyntheticSpec::default() }
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let spec = small_spec();
        let a = gen_synthetic(&spec, Split::Train, 3).unwrap();
        let b = gen_synthetic(&spec, Split::Train, 3).unwrap();
        assert_eq!(a, b);
        let test = gen_synthetic(&spec, Split::Test, 3).unwrap();
        assert_ne!(a.images[..test.images.len()], test.images[..]);
        let other_seed = gen_synthetic(&spec, Split::Train, 4).unwrap();
        assert_ne!(a.images, other_seed.images);
    }

    #[test]
    fn zero_noise_collapses_to_templates() {
        let spec = SyntheticSpec { noise_std: 0.0, ..small_spec() };
        let data = gen_synthetic(&spec, Split::Train, 1).unwrap();
        let templates = class_templates(&spec, spec.template_seed);
        for i in 0..data.len() {
            assert_eq!(data.image(i), &templates[data.labels[i]][..]);
        }
    }

    #[test]
    fn labels_are_balanced() {
        let data = gen_synthetic(&small_spec(), Split::Train, 2).unwrap();
        let mut counts = vec![0usize; data.num_classes];
        for &y in &data.labels {
            counts[y] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1, "{counts:?}");
    }

    fn nearest_template(image: &[f32], templates: &[Vec<f32>]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, t) in templates.iter().enumerate() {
            let d: f64 = image
                .iter()
                .zip(t)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    #[test]
    fn nearest_template_classifier_is_accurate() {
        let spec = small_spec();
        let data = gen_synthetic(&spec, Split::Test, 5).unwrap();
        let templates = class_templates(&spec, spec.template_seed);
        let correct = (0..data.len())
            .filter(|&i| nearest_template(data.image(i), &templates) == data.labels[i])
            .count();
        assert!(
            correct as f64 / data.len() as f64 > 0.95,
            "{correct}/{}",
            data.len()
        );
    }

    #[test]
    fn ood_is_far_from_in_distribution_templates() {
        let spec = small_spec();
        let in_data = gen_synthetic(&spec, Split::Test, 6).unwrap();
        let ood = gen_ood(&spec, 6).unwrap();
        assert_eq!(ood.len(), in_data.len());
        assert_eq!(ood.pixels(), in_data.pixels());
        assert_eq!(ood, gen_ood(&spec, 6).unwrap());

        let templates = class_templates(&spec, spec.template_seed);
        let min_dist = |img: &[f32]| {
            templates
                .iter()
                .map(|t| {
                    img.iter()
                        .zip(t)
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let mean_in: f64 =
            (0..in_data.len()).map(|i| min_dist(in_data.image(i))).sum::<f64>() / in_data.len() as f64;
        let mean_ood: f64 =
            (0..ood.len()).map(|i| min_dist(ood.image(i))).sum::<f64>() / ood.len() as f64;
        assert!(mean_ood > 2.0 * mean_in, "in {mean_in}, ood {mean_ood}");
    }

    #[test]
    fn same_template_seeds_are_rejected() {
        let spec = SyntheticSpec { ood_template_seed: 7, ..small_spec() };
        assert!(gen_synthetic(&spec, Split::Train, 0).is_err());
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let data = gen_synthetic(&small_spec(), Split::Train, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.lds");
        write_dataset(&path, &data).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(data, back);
        let bytes_a = encode_dataset(&data).unwrap();
        let bytes_b = encode_dataset(&back).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn decoder_rejects_malformed_files() {
        let data = gen_synthetic(&small_spec(), Split::Test, 9).unwrap();
        let mut bytes = encode_dataset(&data).unwrap();
        assert!(decode_dataset(&bytes[..10]).is_err());
        bytes[0] = b'X';
        assert!(decode_dataset(&bytes).is_err());
        bytes[0] = b'L';
        bytes.pop();
        assert!(decode_dataset(&bytes).is_err());
    }

    #[test]
    fn severity_zero_is_identity_for_all_kinds() {
        let data = gen_synthetic(&small_spec(), Split::Test, 11).unwrap();
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec { kind, severity: 0 };
            assert_eq!(corrupt(&data, &spec, 1).unwrap(), data, "{}", kind.name());
        }
        let bad = CorruptionSpec { kind: CorruptionKind::Blur, severity: 6 };
        assert!(corrupt(&data, &bad, 1).is_err());
    }

    #[test]
    fn gaussian_noise_variance_strictly_increases() {
        let data = gen_synthetic(&small_spec(), Split::Test, 12).unwrap();
        let mut last = -1.0f64;
        for severity in 1..=5u8 {
            let spec = CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity };
            let shifted = corrupt(&data, &spec, 2).unwrap();
            let var: f64 = data
                .images
                .iter()
                .zip(&shifted.images)
                .map(|(&a, &b)| (b as f64 - a as f64).powi(2))
                .sum::<f64>()
                / data.images.len() as f64;
            assert!(var > last, "severity {severity}: {var} <= {last}");
            last = var;
        }
    }

    #[test]
    fn contrast_distance_strictly_increases() {
        let data = gen_synthetic(&small_spec(), Split::Test, 13).unwrap();
        let mut last = -1.0f64;
        for severity in 1..=5u8 {
            let spec = CorruptionSpec { kind: CorruptionKind::Contrast, severity };
            let shifted = corrupt(&data, &spec, 3).unwrap();
            let dist: f64 = data
                .images
                .iter()
                .zip(&shifted.images)
                .map(|(&a, &b)| (b as f64 - a as f64).powi(2))
                .sum();
            assert!(dist > last, "contrast severity {severity}");
            last = dist;
        }
    }

    #[test]
    fn blur_removes_strictly_more_variance_per_severity() {
        let data = gen_synthetic(&small_spec(), Split::Test, 13).unwrap();
        let pixels = data.pixels();
        let mean_var = |d: &Dataset| {
            d.images
                .chunks_exact(pixels)
                .map(|img| {
                    let m: f64 = img.iter().map(|&x| x as f64).sum::<f64>() / pixels as f64;
                    img.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / pixels as f64
                })
                .sum::<f64>()
                / d.len() as f64
        };
        let mut last = mean_var(&data);
        for severity in 1..=5u8 {
            let spec = CorruptionSpec { kind: CorruptionKind::Blur, severity };
            let var = mean_var(&corrupt(&data, &spec, 3).unwrap());
            assert!(var < last, "blur severity {severity}: {var} >= {last}");
            last = var;
        }
    }

    #[test]
    fn linear_kinds_preserve_zero_images() {
        let spec = small_spec();
        let zero = Dataset {
            images: vec![0.0; 4 * spec.pixels()],
            labels: vec![0, 1, 2, 3],
            image_size: spec.image_size,
            channels: spec.channels,
            num_classes: spec.num_classes,
        };
        for kind in [CorruptionKind::Contrast, CorruptionKind::Blur] {
            for severity in 1..=5u8 {
                let out = corrupt(&zero, &CorruptionSpec { kind, severity }, 4).unwrap();
                assert!(out.images.iter().all(|&x| x == 0.0), "{}", kind.name());
            }
        }
    }

    #[test]
    fn pixel_dropout_hits_expected_fraction() {
        let spec = SyntheticSpec { noise_std: 0.0, ..small_spec() };
        let mut data = gen_synthetic(&spec, Split::Test, 14).unwrap();
        for x in data.images.iter_mut() {
            *x += 1.0;
        }
        let shifted =
            corrupt(&data, &CorruptionSpec { kind: CorruptionKind::PixelDropout, severity: 3 }, 5)
                .unwrap();
        let dropped = shifted.images.iter().filter(|&&x| x == 0.0).count();
        let fraction = dropped as f64 / shifted.images.len() as f64;
        assert!((fraction - 0.2).abs() < 0.03, "dropout fraction {fraction}");
    }

    #[test]
    fn corruption_kind_names_round_trip() {
        for kind in CorruptionKind::ALL {
            assert_eq!(CorruptionKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(CorruptionKind::parse("fog").is_err());
    }
}
