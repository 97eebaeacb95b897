//! Image datasets: the CIFAR-10 binary record format, a synthetic benchmark
//! whose labels live in the per-position channel moments, and batching.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::moex::one_hot;
use crate::tensor::{Real, Shape4, Tensor4};

pub const SIDE: usize = 32;
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const CIFAR10_CLASSES: usize = 10;

/// 3x32x32 `u8` images (channel-major planes) with integer labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageDataset {
    images: Vec<u8>,
    labels: Vec<usize>,
    classes: usize,
}

impl ImageDataset {
    pub fn new(images: Vec<u8>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_BYTES {
            return Err(Error::invalid(
                "dataset",
                format!("{} image bytes for {} labels", images.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid("dataset", format!("label {bad} outside 0..{classes}")));
        }
        Ok(ImageDataset { images, labels, classes })
    }

    pub fn empty(classes: usize) -> Self {
        ImageDataset {
            images: Vec::new(),
            labels: Vec::new(),
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    pub fn image(&self, i: usize) -> Image<u8> {
        Image::new(SIDE, SIDE, self.image_bytes(i).to_vec())
    }

    pub fn select(&self, indices: &[usize]) -> ImageDataset {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            images.extend_from_slice(self.image_bytes(i));
        }
        ImageDataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Seeded subset of `n` distinct examples (all of them if `n >= len`),
    /// in their original relative order.
    pub fn subset(&self, n: usize, seed: u64) -> ImageDataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Serialize as consecutive 3073-byte records.
    pub fn write_binary(&self, mut out: impl Write) -> Result<()> {
        for i in 0..self.len() {
            if self.labels[i] > u8::MAX as usize {
                return Err(Error::invalid("dataset", format!("label {} does not fit a byte", self.labels[i])));
            }
            out.write_all(&[self.labels[i] as u8])?;
            out.write_all(self.image_bytes(i))?;
        }
        Ok(())
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_binary(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Per-channel mean and standard deviation of the raw pixel values.
    pub fn channel_stats(&self) -> ChannelStats {
        let plane = SIDE * SIDE;
        let mut mean = [0.0; CHANNELS];
        let mut std = [1.0; CHANNELS];
        if self.is_empty() {
            return ChannelStats { mean, std };
        }
        let count = (self.len() * plane) as f64;
        for c in 0..CHANNELS {
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for i in 0..self.len() {
                for &v in &self.image_bytes(i)[c * plane..(c + 1) * plane] {
                    let v = v as f64;
                    s += v;
                    s2 += v * v;
                }
            }
            let m = s / count;
            mean[c] = m;
            std[c] = (s2 / count - m * m).max(0.0).sqrt().max(1e-6);
        }
        ChannelStats { mean, std }
    }
}

/// Parse CIFAR-10 binary batches. Records are
/// `[label][1024 R][1024 G][1024 B]`; order is preserved across files.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<ImageDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            index: 0,
            reason: e.to_string(),
        })?;
        parse_records(path, &bytes, &mut images, &mut labels)?;
    }
    ImageDataset::new(images, labels, CIFAR10_CLASSES)
}

fn parse_records(path: &Path, bytes: &[u8], images: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            index: bytes.len() / RECORD_BYTES,
            reason: format!("file length {} is not a multiple of {RECORD_BYTES}", bytes.len()),
        });
    }
    for (index, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                index,
                reason: format!("label byte {label} > 9"),
            });
        }
        labels.push(label);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// Standard CIFAR-10 binary file names below `dir`.
pub fn cifar10_files(dir: &Path, train: bool) -> Vec<PathBuf> {
    if train {
        (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
    } else {
        vec![dir.join("test_batch.bin")]
    }
}

/// Frozen per-channel standardization constants, in raw pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl ChannelStats {
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    /// `(v - mean[c]) / std[c]` written into `out`.
    pub fn standardize_into<T: Real>(&self, img: &Image<u8>, out: &mut [T]) {
        let plane = img.height * img.width;
        for (i, (&v, o)) in img.data.iter().zip(out.iter_mut()).enumerate() {
            let c = i / plane;
            *o = T::lit((v as f64 - self.mean[c]) / self.std[c]);
        }
    }
}

/// Generator settings for [`synth_moment_dataset_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Brightness step between neighbouring class levels, in pixel units.
    pub level_step: f64,
    /// Relative amplitude of the shared low-frequency modulation.
    pub modulation: f64,
    /// Noise standard deviation relative to the local template contrast.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            level_step: 10.0,
            modulation: 0.25,
            noise: 0.3,
        }
    }
}

pub const SYNTH_MAX_CLASSES: usize = 16;
const SYNTH_CENTER: f64 = 127.5;

/// Synthetic dataset plus generator internals.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub data: ImageDataset,
    /// Noise-free per-class templates (one plane, shared by the channels).
    pub templates: Vec<Vec<f64>>,
    /// Lower bound on the gap between the spatially averaged channel-mean
    /// maps of any two classes, in pixel units.
    pub margin: f64,
}

/// Signed class contrast: `+-1, +-2, ...`, alternating sign so the classes are
/// balanced around the centre intensity.
fn class_level(k: usize) -> f64 {
    let mag = (k / 2 + 1) as f64;
    if k % 2 == 0 {
        mag
    } else {
        -mag
    }
}

fn modulation_pattern(y: usize, x: usize) -> f64 {
    let t = std::f64::consts::TAU / SIDE as f64;
    ((y as f64 + 0.5) * t).cos() * ((x as f64 + 0.5) * t).cos()
}

/// Noise-free template of class `k`: `127.5 + step * L_k * (1 + m * g(p))`,
/// with `g` a shared smooth pattern.
pub fn synth_template(k: usize, cfg: &SynthConfig) -> Vec<f64> {
    let level = class_level(k) * cfg.level_step;
    let mut t = Vec::with_capacity(SIDE * SIDE);
    for y in 0..SIDE {
        for x in 0..SIDE {
            t.push(SYNTH_CENTER + level * (1.0 + cfg.modulation * modulation_pattern(y, x)));
        }
    }
    t
}

pub fn synth_moment_dataset(seed: u64, n_per_class: usize, classes: usize) -> Result<SynthDataset> {
    synth_moment_dataset_with(seed, n_per_class, classes, &SynthConfig::default())
}

/// Class `k` images are the template `t_k` replicated over the three
/// channels plus i.i.d. zero-mean Gaussian noise per channel and pixel whose
/// standard deviation is `noise * |t_k(p) - 127.5|`. The label is therefore
/// carried by the per-position channel mean; the channel-normalized content
/// only reveals the sign of the contrast. Examples are interleaved by class.
pub fn synth_moment_dataset_with(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    cfg: &SynthConfig,
) -> Result<SynthDataset> {
    if classes == 0 || classes > SYNTH_MAX_CLASSES {
        return Err(Error::invalid(
            "synthetic dataset",
            format!("classes must be in 1..={SYNTH_MAX_CLASSES}, got {classes}"),
        ));
    }
    if !(cfg.noise >= 0.0 && cfg.level_step > 0.0 && cfg.modulation.abs() < 1.0) {
        return Err(Error::invalid("synthetic dataset", format!("bad generator settings {cfg:?}")));
    }
    let templates: Vec<Vec<f64>> = (0..classes).map(|k| synth_template(k, cfg)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(classes * n_per_class * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for _ in 0..n_per_class {
        for (k, t) in templates.iter().enumerate() {
            for _ in 0..CHANNELS {
                for &v in t {
                    let z: f64 = rng.sample(StandardNormal);
                    let px = v + cfg.noise * (v - SYNTH_CENTER).abs() * z;
                    images.push(px.round().clamp(0.0, 255.0) as u8);
                }
            }
            labels.push(k);
        }
    }
    // Spatial averages of neighbouring levels differ by `level_step`; half of
    // it is kept as slack for rounding, clipping and sampling noise.
    let margin = if classes > 1 { 0.5 * cfg.level_step } else { 0.0 };
    Ok(SynthDataset {
        data: ImageDataset::new(images, labels, classes)?,
        templates,
        margin,
    })
}

/// One assembled mini-batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub x: Tensor4<T>,
    pub labels: Vec<usize>,
    /// One-hot rows.
    pub y: Tensor4<T>,
}

/// Visit order for one epoch: a fresh shuffle drawn from `rng`.
pub fn epoch_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Standardized batch for `indices`, passing each raw image through
/// `transform` first.
pub fn assemble<T: Real>(
    data: &ImageDataset,
    indices: &[usize],
    stats: &ChannelStats,
    mut transform: impl FnMut(Image<u8>) -> Image<u8>,
) -> Batch<T> {
    let shape = Shape4::new(indices.len(), CHANNELS, SIDE, SIDE);
    let mut x = Tensor4::zeros(shape);
    for (slot, &i) in indices.iter().enumerate() {
        let img = transform(data.image(i));
        stats.standardize_into(&img, x.instance_mut(slot));
    }
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels()[i]).collect();
    Batch {
        indices: indices.to_vec(),
        x,
        y: one_hot(&labels, data.classes()),
        labels,
    }
}

/// One epoch of standardized batches in a shuffled order drawn from `rng`; the
/// final partial batch is kept.
pub fn batches<'a, T: Real, R: Rng + ?Sized>(
    data: &'a ImageDataset,
    batch_size: usize,
    stats: &'a ChannelStats,
    rng: &mut R,
) -> impl Iterator<Item = Batch<T>> + 'a {
    let order = epoch_order(data.len(), rng);
    let size = batch_size.max(1);
    (0..data.len().div_ceil(size)).map(move |b| {
        let idx = &order[b * size..((b + 1) * size).min(order.len())];
        assemble(data, idx, stats, |img| img)
    })
}

/// Batches in dataset order, without shuffling.
pub fn sequential_batches<'a, T: Real>(
    data: &'a ImageDataset,
    batch_size: usize,
    stats: &'a ChannelStats,
) -> impl Iterator<Item = Batch<T>> + 'a {
    let size = batch_size.max(1);
    (0..data.len().div_ceil(size)).map(move |b| {
        let idx: Vec<usize> = (b * size..((b + 1) * size).min(data.len())).collect();
        assemble(data, &idx, stats, |img| img)
    })
}
