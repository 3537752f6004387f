//! Labelled image sets: the synthetic benchmark generator and CIFAR-100 binary ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Blob;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `(N, C, W, H)` with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.train.image_shape()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut b = Blob::new();
        b.put_ints("num_classes", &[self.num_classes as u64]);
        for (name, s) in [("train", &self.train), ("test", &self.test)] {
            b.put_tensor(&format!("{name}.images"), &s.images);
            b.put_ints(&format!("{name}.labels"), &s.labels.iter().map(|&l| l as u64).collect::<Vec<_>>());
        }
        b.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = Blob::load(path)?;
        let num_classes = *b
            .ints("num_classes")?
            .first()
            .ok_or_else(|| Error::Format("empty num_classes".into()))? as usize;
        let split = |name: &str| -> Result<Split> {
            let images = b.tensor(&format!("{name}.images"))?.clone();
            let labels: Vec<usize> = b.ints(&format!("{name}.labels"))?.iter().map(|&l| l as usize).collect();
            if images.shape().len() != 4 || images.shape()[0] != labels.len() {
                return Err(Error::Format(format!("{name}: {} labels for images {:?}", labels.len(), images.shape())));
            }
            if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Format(format!("{name}: label {l} >= {num_classes}")));
            }
            Ok(Split { images, labels })
        };
        Ok(Dataset {
            num_classes,
            train: split("train")?,
            test: split("test")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// (channels, width, height)
    pub image_shape: (usize, usize, usize),
    pub pattern_seed: u64,
    pub noise_sigma: f64,
    /// Amplitude of each class's own pattern on top of the pattern shared by all classes.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
}

fn default_contrast() -> f64 {
    0.32
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            samples_per_class: 100,
            image_shape: (3, 8, 8),
            pattern_seed: 7,
            noise_sigma: 0.3,
            contrast: default_contrast(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, w, h) = self.image_shape;
        if c == 0 || w == 0 || h == 0 {
            return Err(Error::contract(format!("degenerate image shape {:?}", self.image_shape)));
        }
        if self.classes < 2 {
            return Err(Error::contract(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.samples_per_class < 2 {
            return Err(Error::contract("need at least 2 samples per class for a train/test split"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::contract(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.contrast >= 0.0 && self.contrast.is_finite()) {
            return Err(Error::contract(format!("contrast must be >= 0, got {}", self.contrast)));
        }
        Ok(())
    }
}

/// Training rows per class under the fixed 80/20 split.
pub fn train_count(samples_per_class: usize) -> usize {
    ((samples_per_class * 4) / 5).clamp(1, samples_per_class - 1)
}

/// A smooth random pattern: a few Gaussian bumps of random sign per channel.
fn smooth_pattern(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    let (c, w, h) = shape;
    let mut out = vec![0.0; c * w * h];
    let bumps = 3;
    for ch in 0..c {
        for _ in 0..bumps {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let r = rng.random_range(0.8..2.0) * (w.min(h) as f64 / 8.0).max(0.5);
            let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.5..1.0);
            for x in 0..w {
                for y in 0..h {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    out[(ch * w + x) * h + y] += amp * (-d2 / (2.0 * r * r)).exp();
                }
            }
        }
    }
    out
}

/// Each class is a fixed template (shared pattern plus `contrast` times a
/// class pattern, both drawn from `pattern_seed`) plus i.i.d. Gaussian pixel
/// noise drawn from `seed`. The first 80% of every class's samples train.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let (c, w, h) = spec.image_shape;
    let mut prng = ChaCha8Rng::seed_from_u64(spec.pattern_seed);
    let shared = smooth_pattern(spec.image_shape, &mut prng);
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            smooth_pattern(spec.image_shape, &mut prng)
                .iter()
                .zip(&shared)
                .map(|(p, s)| s + spec.contrast * p)
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::contract(e.to_string()))?;
    let n_train = train_count(spec.samples_per_class);
    let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (label, t) in templates.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let (xs, ys) = if i < n_train { (&mut tr_x, &mut tr_y) } else { (&mut te_x, &mut te_y) };
            xs.extend(t.iter().map(|v| v + noise.sample(&mut rng)));
            ys.push(label);
        }
    }
    let n_test = te_y.len();
    let train_rows = tr_y.len();
    Ok(Dataset {
        num_classes: spec.classes,
        train: Split {
            images: Tensor::new(vec![train_rows, c, w, h], tr_x)?,
            labels: tr_y,
        },
        test: Split {
            images: Tensor::new(vec![n_test, c, w, h], te_x)?,
            labels: te_y,
        },
    })
}

pub const CIFAR_RECORD: usize = 2 + 3072;
pub const CIFAR_CLASSES: usize = 100;

/// Decodes CIFAR-100 binary records into `(N, 3, 32, 32)` pixels in `[0, 1]` and fine labels.
pub fn decode_cifar100(bytes: &[u8]) -> Result<Split> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-100 file of {} bytes is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let fine = rec[1] as usize;
        if fine >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {i}: fine label {fine} >= {CIFAR_CLASSES}")));
        }
        labels.push(fine);
        pixels.extend(rec[2..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Split {
        images: Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
    })
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn of(split: &Split) -> Self {
        let s = split.images.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for v in &split.images.values()[off..off + plane] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (n * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt()
            })
            .collect();
        ChannelStats { mean, std }
    }

    /// Subtracts the mean and divides by the std (a zero std leaves values centred only).
    pub fn apply(&self, split: &mut Split) {
        let s = split.images.shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        for (i, v) in split.images.values_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            let sd = if self.std[ch] > 0.0 { self.std[ch] } else { 1.0 };
            *v = (*v - self.mean[ch]) / sd;
        }
    }
}

/// Reads one CIFAR-100 binary file and standardizes it with its own channel statistics.
pub fn ingest_cifar_binary(path: &Path) -> Result<Split> {
    let mut split = decode_cifar100(&std::fs::read(path)?)?;
    ChannelStats::of(&split).apply(&mut split);
    Ok(split)
}

/// Keeps rows whose label is in `classes`, relabelled to their position in that list.
pub fn select_classes(split: &Split, classes: &[usize]) -> Result<Split> {
    let rows: Vec<usize> = (0..split.len()).filter(|&i| classes.contains(&split.labels[i])).collect();
    if rows.is_empty() {
        return Err(Error::contract(format!("no samples for classes {classes:?}")));
    }
    Ok(Split {
        images: split.images.select_rows(&rows)?,
        labels: rows
            .iter()
            .map(|&i| classes.iter().position(|&c| c == split.labels[i]).unwrap())
            .collect(),
    })
}

/// Train/test CIFAR-100 pair; test is standardized with the train statistics.
pub fn load_cifar100(train: &Path, test: &Path, classes: Option<&[usize]>) -> Result<Dataset> {
    let mut tr = decode_cifar100(&std::fs::read(train)?)?;
    let mut te = decode_cifar100(&std::fs::read(test)?)?;
    let num_classes = match classes {
        Some(list) => {
            tr = select_classes(&tr, list)?;
            te = select_classes(&te, list)?;
            list.len()
        }
        None => CIFAR_CLASSES,
    };
    let stats = ChannelStats::of(&tr);
    stats.apply(&mut tr);
    stats.apply(&mut te);
    Ok(Dataset {
        num_classes,
        train: tr,
        test: te,
    })
}

/// Deterministic shuffle helper shared by callers that need a seeded permutation.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}
