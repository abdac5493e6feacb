//! Synthetic multi-domain segmentation data: soft elliptical blobs on a
//! textured background, per-domain intensity corruption, augmentation,
//! Dice scoring and the binary dataset format.

mod augment;
mod io;

pub use augment::{augment, augment_with, Affine, AugmentConfig, Transform};
pub use io::{
    dataset_from_bytes, dataset_load, dataset_save, dataset_to_bytes, pgm_bytes, write_pgm, DATASET_HEADER_LEN,
    DATASET_MAGIC, DATASET_VERSION,
};

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::parallel::{map_indexed, Execution};
use crate::rng::{stream, Rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported version: expected {expected}, found {found}")]
    Version { expected: u16, found: u16 },
    #[error("truncated data: need {expected} bytes, have {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("degenerate blob configuration: {0}")]
    Degenerate(String),
    #[error("invalid data: {0}")]
    Invalid(String),
}

impl DataError {
    /// True for failures of the file itself (I/O, corruption), as opposed to bad arguments.
    pub fn is_io(&self) -> bool {
        !matches!(self, DataError::Degenerate(_) | DataError::Invalid(_))
    }
}

/// One z-scored image and its label map, row-major `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(height: usize, width: usize, image: Vec<f64>, mask: Vec<u8>) -> Result<Self, DataError> {
        let p = height * width;
        if p == 0 || image.len() != p || mask.len() != p {
            return Err(DataError::Invalid(format!(
                "sample {height}x{width} with {} pixels and {} labels",
                image.len(),
                mask.len()
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite pixel".into()));
        }
        Ok(Self {
            height,
            width,
            image,
            mask,
        })
    }
}

/// Samples sharing dimensions and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub classes: u8,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, classes: u8, samples: Vec<Sample>) -> Result<Self, DataError> {
        if classes < 2 {
            return Err(DataError::Invalid(format!("need at least 2 classes, got {classes}")));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.height != height || s.width != width {
                return Err(DataError::Invalid(format!(
                    "sample {i} is {}x{}, dataset is {height}x{width}",
                    s.height, s.width
                )));
            }
            if let Some(l) = s.mask.iter().find(|l| **l >= classes) {
                return Err(DataError::Invalid(format!("sample {i} has label {l} >= {classes}")));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Blob geometry as fractions of the smaller image side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobConfig {
    /// Max offset of the centre from the image centre.
    pub center_jitter: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Width of the soft intensity edge, in pixels.
    pub softness: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            center_jitter: 0.12,
            radius_min: 0.15,
            radius_max: 0.3,
            softness: 1.0,
        }
    }
}

/// Intensity model of one acquisition domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainConfig {
    pub name: String,
    pub noise_sigma: f64,
    /// Amplitude of the smooth multiplicative bias field.
    pub bias_amplitude: f64,
    pub contrast_gamma: f64,
    pub texture_amplitude: f64,
    pub blob: BlobConfig,
    /// 2 for blob/background; 3 adds an inner core labelled 2.
    pub classes: u8,
    pub seed: u64,
}

impl DomainConfig {
    pub fn named(name: &str) -> Option<Self> {
        let base = Self {
            name: name.to_string(),
            noise_sigma: 0.05,
            bias_amplitude: 0.1,
            contrast_gamma: 1.0,
            texture_amplitude: 0.05,
            blob: BlobConfig::default(),
            classes: 2,
            seed: 42,
        };
        let cfg = match name {
            "A" => base,
            "B" => Self {
                noise_sigma: 0.1,
                bias_amplitude: 0.2,
                contrast_gamma: 0.8,
                ..base
            },
            "C" => Self {
                noise_sigma: 0.6,
                bias_amplitude: 0.7,
                contrast_gamma: 1.8,
                texture_amplitude: 0.25,
                ..base
            },
            "D" => Self {
                noise_sigma: 0.15,
                bias_amplitude: 0.3,
                contrast_gamma: 1.3,
                blob: BlobConfig {
                    radius_min: 0.12,
                    radius_max: 0.25,
                    softness: 2.0,
                    ..BlobConfig::default()
                },
                ..base
            },
            _ => return None,
        };
        Some(cfg)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let b = &self.blob;
        if !(b.radius_min > 0.0) || !(b.radius_max >= b.radius_min) {
            return Err(DataError::Degenerate(format!(
                "radii [{}, {}] must satisfy 0 < min <= max",
                b.radius_min, b.radius_max
            )));
        }
        if b.center_jitter < 0.0 || b.center_jitter + b.radius_max > 0.5 {
            return Err(DataError::Degenerate(format!(
                "jitter {} + max radius {} leaves the image",
                b.center_jitter, b.radius_max
            )));
        }
        if !(b.softness > 0.0) {
            return Err(DataError::Degenerate(format!("softness {} must be > 0", b.softness)));
        }
        if self.noise_sigma < 0.0 || self.bias_amplitude < 0.0 || self.bias_amplitude >= 1.0 {
            return Err(DataError::Invalid("noise must be >= 0 and bias in [0, 1)".into()));
        }
        if !(self.contrast_gamma > 0.0) || self.texture_amplitude < 0.0 {
            return Err(DataError::Invalid("gamma must be > 0 and texture >= 0".into()));
        }
        if !(2..=3).contains(&self.classes) {
            return Err(DataError::Invalid(format!("classes must be 2 or 3, got {}", self.classes)));
        }
        Ok(())
    }

    /// Expected foreground fraction of an `H x W` image implied by the radii.
    pub fn expected_foreground_fraction(&self, height: usize, width: usize) -> f64 {
        let side = height.min(width) as f64;
        let mean_r = 0.5 * (self.blob.radius_min + self.blob.radius_max) * side;
        PI * mean_r * mean_r / (height * width) as f64
    }
}

/// Subtracts the mean and divides by the population standard deviation.
pub fn z_score(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
    values.iter_mut().for_each(|v| *v = (*v - mean) * scale);
}

/// Smooth field in `[-1, 1]` built from a few low-frequency plane waves.
fn smooth_field(height: usize, width: usize, waves: usize, max_freq: f64, rng: &mut Rng) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            (
                rng.random_range(-max_freq..=max_freq),
                rng.random_range(-max_freq..=max_freq),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let norm: f64 = comps.iter().map(|c| c.3).sum();
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let (y, x) = (i as f64 / height as f64, j as f64 / width as f64);
            let v: f64 = comps
                .iter()
                .map(|(fx, fy, ph, a)| a * (2.0 * PI * (fx * x + fy * y) + ph).sin())
                .sum();
            out.push(v / norm);
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One sample of the domain's generative model.
pub fn gen_sample(domain: &DomainConfig, height: usize, width: usize, rng: &mut Rng) -> Result<Sample, DataError> {
    domain.validate()?;
    let side = height.min(width) as f64;
    let b = domain.blob;
    let cy = 0.5 * height as f64 + rng.random_range(-1.0..=1.0) * b.center_jitter * side;
    let cx = 0.5 * width as f64 + rng.random_range(-1.0..=1.0) * b.center_jitter * side;
    let ra = rng.random_range(b.radius_min..=b.radius_max) * side;
    let rb = rng.random_range(b.radius_min..=b.radius_max) * side;
    let theta = rng.random_range(0.0..PI);
    let (st, ct) = theta.sin_cos();
    let texture = smooth_field(height, width, 4, 6.0, rng);
    let bias = smooth_field(height, width, 3, 1.0, rng);

    let (bg, fg, core) = (0.25, 0.75, 0.95);
    let mut image = Vec::with_capacity(height * width);
    let mut mask = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
            let u = (ct * dx + st * dy) / ra;
            let v = (-st * dx + ct * dy) / rb;
            let rho = (u * u + v * v).sqrt();
            let mean_r = 0.5 * (ra + rb);
            // signed distance to the boundary, approximately in pixels
            let dist = (1.0 - rho) * mean_r;
            let weight = sigmoid(dist / b.softness);
            let mut label = u8::from(rho <= 1.0);
            let mut clean = bg + (fg - bg) * weight;
            if domain.classes == 3 {
                let inner = sigmoid((0.5 - rho) * mean_r / b.softness);
                clean += (core - fg) * inner;
                if rho <= 0.5 {
                    label = 2;
                }
            }
            clean += domain.texture_amplitude * texture[i * width + j] * (1.0 - weight);
            let shaped = clean.clamp(1e-6, 1.0).powf(domain.contrast_gamma);
            let biased = shaped * (1.0 + domain.bias_amplitude * bias[i * width + j]);
            let noisy = biased + domain.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            image.push(noisy);
            mask.push(label);
        }
    }
    z_score(&mut image);
    Sample::new(height, width, image, mask)
}

/// `n` samples; sample `i` uses its own stream derived from a seed drawn from `rng`,
/// so the result does not depend on the execution mode.
pub fn gen_dataset(
    domain: &DomainConfig,
    n: usize,
    height: usize,
    width: usize,
    rng: &mut Rng,
) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::Invalid("n must be >= 1".into()));
    }
    if height < 4 || width < 4 || height > u16::MAX as usize || width > u16::MAX as usize {
        return Err(DataError::Invalid(format!("unsupported image size {height}x{width}")));
    }
    domain.validate()?;
    let base: u64 = rng.random();
    let samples = map_indexed(Execution::default(), n, |i| {
        gen_sample(domain, height, width, &mut stream(base, &[i as u64]))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(height, width, domain.classes, samples)
}

/// `2 |P & G| / (|P| + |G|)` for label `class`; 1 when both are empty.
pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> Result<f64, DataError> {
    if pred.len() != gt.len() {
        return Err(DataError::Invalid(format!(
            "label maps differ in size: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (*p == class, *g == class);
        inter += usize::from(a && b);
        np += usize::from(a);
        ng += usize::from(b);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Mean Dice over the foreground classes `1..K`.
pub fn foreground_dice(pred: &[u8], gt: &[u8], classes: u8) -> Result<f64, DataError> {
    let mut total = 0.0;
    for k in 1..classes {
        total += dice_score(pred, gt, k)?;
    }
    Ok(total / f64::from(classes - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn named_domains_are_distinct_and_valid() {
        let names = ["A", "B", "C", "D"];
        let cfgs: Vec<_> = names.iter().map(|n| DomainConfig::named(n).unwrap()).collect();
        for (i, a) in cfgs.iter().enumerate() {
            a.validate().unwrap();
            for b in &cfgs[i + 1..] {
                let mut b = b.clone();
                b.name = a.name.clone();
                assert_ne!(*a, b);
            }
        }
        assert!(DomainConfig::named("E").is_none());
    }

    #[test]
    fn degenerate_radii_rejected() {
        let mut d = DomainConfig::named("A").unwrap();
        d.blob.radius_min = 0.0;
        assert!(matches!(
            gen_dataset(&d, 2, 16, 16, &mut seeded(0)),
            Err(DataError::Degenerate(_))
        ));
    }

    #[test]
    fn samples_are_z_scored() {
        let d = DomainConfig::named("B").unwrap();
        let ds = gen_dataset(&d, 3, 32, 32, &mut seeded(1)).unwrap();
        for s in &ds.samples {
            let n = s.image.len() as f64;
            let mean = s.image.iter().sum::<f64>() / n;
            let var = s.image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
            assert!(s.mask.contains(&1) && s.mask.contains(&0));
        }
    }

    #[test]
    fn three_class_domain_has_core() {
        let mut d = DomainConfig::named("A").unwrap();
        d.classes = 3;
        let ds = gen_dataset(&d, 2, 32, 32, &mut seeded(2)).unwrap();
        assert_eq!(ds.classes, 3);
        assert!(ds.samples[0].mask.contains(&2));
    }

    #[test]
    fn dice_spot_values() {
        assert_eq!(dice_score(&[1, 1, 0], &[1, 1, 0], 1).unwrap(), 1.0);
        assert_eq!(dice_score(&[1, 0], &[0, 1], 1).unwrap(), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0], 1).unwrap(), 1.0);
        let mut p = vec![0u8; 300];
        let mut g = vec![0u8; 300];
        p[..100].iter_mut().for_each(|v| *v = 1);
        g[50..150].iter_mut().for_each(|v| *v = 1);
        assert!((dice_score(&p, &g, 1).unwrap() - 0.5).abs() < 1e-15);
    }
}
