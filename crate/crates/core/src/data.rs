//! Datasets: CIFAR-10 binary batches, a seeded synthetic stand-in, and
//! seeded splits. Pixels are in `[0, 1]` with no further normalization, so
//! attack budgets are in raw pixel units.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset("pixel outside [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_leading(idx)?;
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(idx)?;
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
            provenance: self.provenance.clone(),
        })
    }

    /// First `n` items (all of them when `n` is larger).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Seeded partition into `(train, rest)`; `round(N·fraction)` items go to
/// `train`.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Dataset(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let (train_idx, rest_idx) = split_indices(ds.len(), train_fraction, seed)?;
    Ok((ds.subset(&train_idx)?, ds.subset(&rest_idx)?))
}

pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Dataset(format!(
            "split of {n} items at {train_fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rest = idx.split_off(n_train);
    Ok((idx, rest))
}

/// Parses concatenated CIFAR-10 records: one label byte followed by 3072
/// pixel bytes (R plane, G plane, B plane, each 32×32 row-major).
pub fn parse_cifar10(bytes: &[u8], provenance: &str) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset(format!(
            "{provenance}: size {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Dataset(format!("{provenance}: record {i} has label byte {label}")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Dataset::new(images, labels, CIFAR_CLASSES, provenance)
}

pub fn read_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_cifar10(&bytes, &path.display().to_string())
}

fn concat(parts: Vec<Dataset>, provenance: String) -> Result<Dataset> {
    let images: Vec<&Tensor> = parts.iter().map(|d| &d.images).collect();
    let images = Tensor::concat_leading(&images)?;
    let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
    Dataset::new(images, labels, CIFAR_CLASSES, provenance)
}

/// Training split: every `data_batch_*.bin` in `dir`, in name order.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no data_batch_*.bin in {}", dir.display())));
    }
    let parts = files.iter().map(|p| read_cifar10_file(p)).collect::<Result<Vec<_>>>()?;
    concat(parts, format!("cifar10:{}", dir.display()))
}

/// Test split: `test_batch.bin` in `dir`.
pub fn load_cifar10_test(dir: &Path) -> Result<Dataset> {
    read_cifar10_file(&dir.join("test_batch.bin"))
}

/// Seeded smooth-blob images: each class has a fixed template built from a
/// per-channel base level plus Gaussian blobs, and each sample adds i.i.d.
/// `N(0, noise²)` pixel noise before clipping to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Per-pixel noise σ. At the default 0.05 the nearest template recovers
    /// every label (templates sit far apart relative to σ·√pixels).
    pub noise: f64,
    pub blobs: usize,
    /// Scales every template's deviation from mid-grey; smaller values
    /// bring the classes closer together.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            samples_per_class: 100,
            channels: 3,
            image_size: 16,
            noise: 0.05,
            blobs: 3,
            contrast: 1.0,
            seed: 0,
        }
    }
}

/// Class templates, each `C·S·S` values in `[0.1, 0.9]`.
pub fn synth_templates(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.image_size;
    let sf = s as f64;
    (0..cfg.classes)
        .map(|_| {
            let mut img = vec![0.0; cfg.channels * s * s];
            for c in 0..cfg.channels {
                let base: f64 = rng.gen_range(0.3..0.7);
                let blobs: Vec<(f64, f64, f64, f64)> = (0..cfg.blobs)
                    .map(|_| {
                        (
                            rng.gen_range(0.0..sf),
                            rng.gen_range(0.0..sf),
                            rng.gen_range(sf / 8.0..sf / 3.0),
                            rng.gen_range(-0.45..0.45),
                        )
                    })
                    .collect();
                for y in 0..s {
                    for x in 0..s {
                        let mut v = base;
                        for &(cy, cx, width, amp) in &blobs {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            v += amp * (-d2 / (2.0 * width * width)).exp();
                        }
                        img[(c * s + y) * s + x] = (0.5 + cfg.contrast * (v - 0.5)).clamp(0.1, 0.9);
                    }
                }
            }
            img
        })
        .collect()
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.samples_per_class == 0 || cfg.channels == 0 || cfg.image_size == 0 {
        return Err(Error::Dataset(format!("degenerate synthetic config {cfg:?}")));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Dataset(format!("noise must be non-negative, got {}", cfg.noise)));
    }
    if !(cfg.contrast > 0.0 && cfg.contrast <= 1.0) {
        return Err(Error::Dataset(format!("contrast must lie in (0, 1], got {}", cfg.contrast)));
    }
    let templates = synth_templates(cfg);
    // Sample noise comes from its own stream so template layout does not
    // depend on the sample count.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0fa_015e);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = cfg.classes * cfg.samples_per_class;
    let width = templates[0].len();
    let mut pixels = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    // Interleave classes so any prefix is roughly balanced.
    for _ in 0..cfg.samples_per_class {
        for (class, t) in templates.iter().enumerate() {
            labels.push(class);
            pixels.extend(t.iter().map(|&v| {
                let z: f64 = normal.sample(&mut rng);
                (v + cfg.noise * z).clamp(0.0, 1.0)
            }));
        }
    }
    let s = cfg.image_size;
    let images = Tensor::new(vec![n, cfg.channels, s, s], pixels)?;
    Dataset::new(images, labels, cfg.classes, format!("synthetic:seed={}", cfg.seed))
}
