//! Image datasets: MNIST IDX and CIFAR-10 binary loaders, a procedural
//! synthetic generator, and seeded batch iteration.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_path, derive_seed, rng_from};

pub const MNIST_IMAGE_MAGIC: u32 = 2051;
pub const MNIST_LABEL_MAGIC: u32 = 2049;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

/// Images stored `[count, channels, height, width]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    images: Vec<f64>,
    labels: Vec<u32>,
}

impl ImageDataset {
    pub fn new(
        name: impl Into<String>,
        (channels, height, width): (usize, usize, usize),
        class_count: usize,
        images: Vec<f64>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let image_len = channels * height * width;
        if image_len == 0 {
            return Err(Error::Contract("images must have positive size".into()));
        }
        if images.len() != labels.len() * image_len {
            return Err(Error::dim(
                "image buffer length",
                labels.len() * image_len,
                images.len(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::Contract(format!(
                "label {bad} not below class count {class_count}"
            )));
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            name: name.into(),
            channels,
            height,
            width,
            class_count,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    /// First `n` images (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> ImageDataset {
        let n = n.min(self.len());
        ImageDataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    pub fn select(&self, indices: &[usize]) -> ImageDataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        ImageDataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> ImageDataset {
        ImageDataset {
            name: self.name.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            class_count: self.class_count,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Per-channel mean and population standard deviation over all pixels.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let plane = self.height * self.width;
        let mut sum = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for img in self.images.chunks(self.image_len()) {
            for (c, p) in img.chunks(plane).enumerate() {
                sum[c] += p.iter().sum::<f64>();
                sq[c] += p.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let n = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt())
            .collect();
        (mean, std)
    }

    /// SHA-256 over shape, class count, pixel bits and labels, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.len(), self.channels, self.height, self.width, self.class_count] {
            h.update((v as u64).to_le_bytes());
        }
        for v in &self.images {
            h.update(v.to_bits().to_le_bytes());
        }
        for l in &self.labels {
            h.update(l.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            Error::format(
                offset as u64,
                format!(
                    "file truncated: header needs {} bytes, file has {}",
                    offset + 4,
                    bytes.len()
                ),
            )
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::format(
            0,
            format!("bad IDX magic: expected {expected}, found {found}"),
        ));
    }
    Ok(())
}

/// Parses an IDX image file (magic 2051). Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    check_magic(bytes, MNIST_IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "length error: expected {need} bytes for {count}x{rows}x{cols}, file has {}",
                bytes.len()
            ),
        ));
    }
    let pixels = bytes[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

/// Parses an IDX label file (magic 2049).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    check_magic(bytes, MNIST_LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "length error: expected {need} bytes for {count} labels, file has {}",
                bytes.len()
            ),
        ));
    }
    Ok(bytes[8..need].iter().map(|&b| u32::from(b)).collect())
}

pub fn load_mnist_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<ImageDataset> {
    let (count, rows, cols, pixels) = parse_idx_images(&read_file(image_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(label_path.as_ref())?)?;
    if labels.len() != count {
        return Err(Error::format(4, format!("{count} images but {} labels", labels.len())));
    }
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::format(
            8 + pos as u64,
            format!("label {} out of range 0..10", labels[pos]),
        ));
    }
    ImageDataset::new("mnist", (1, rows, cols), 10, pixels, labels)
}

/// Parses concatenated CIFAR-10 records: one label byte, then 1024 red,
/// 1024 green and 1024 blue bytes in row-major 32×32 order.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f64>, Vec<u32>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
        return Err(Error::format(
            whole as u64,
            format!("length {} is not a multiple of {CIFAR_RECORD_LEN}", bytes.len()),
        ));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN * (CIFAR_RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN);
    for (i, rec) in bytes.chunks(CIFAR_RECORD_LEN).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(
                (i * CIFAR_RECORD_LEN) as u64,
                format!("label {} out of range 0..10", rec[0]),
            ));
        }
        labels.push(u32::from(rec[0]));
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<ImageDataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (px, lb) = parse_cifar10(&read_file(p.as_ref())?).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", p.as_ref().display()),
            },
            other => other,
        })?;
        pixels.extend(px);
        labels.extend(lb);
    }
    ImageDataset::new("cifar10", (3, 32, 32), 10, pixels, labels)
}

/// Which split of a dataset directory to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Standard file names under a dataset root.
pub fn mnist_paths(root: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        root.join(format!("{prefix}-images-idx3-ubyte")),
        root.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Loads one MNIST split from the standard file names under `root`.
pub fn load_mnist(root: impl AsRef<Path>, split: Split) -> Result<ImageDataset> {
    let (images, labels) = mnist_paths(root.as_ref(), split);
    load_mnist_idx(images, labels)
}

pub fn cifar10_paths(root: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![root.join("test_batch.bin")],
    }
}

/// Procedurally generated 3-channel images: class `c` is a sinusoidal
/// grating at orientation `π·c/class_count`. Each sample jitters the
/// orientation, phase, frequency, colour tint and background, and adds
/// pixel noise.
pub fn make_synthetic(class_count: usize, per_class: usize, size: usize, seed: u64) -> Result<ImageDataset> {
    if size < 8 {
        return Err(Error::Config(format!(
            "synthetic image size must be at least 8, got {size}"
        )));
    }
    if class_count == 0 {
        return Err(Error::Config("synthetic class count must be positive".into()));
    }
    let plane = size * size;
    let mut images = Vec::with_capacity(class_count * per_class * 3 * plane);
    let mut labels = Vec::with_capacity(class_count * per_class);
    let half = (size as f64 - 1.0) / 2.0;
    for class in 0..class_count {
        let base_angle = PI * class as f64 / class_count as f64;
        for sample in 0..per_class {
            let mut rng = rng_from(derive_path(seed, &[class as u64, sample as u64]));
            let angle = base_angle + rng.random_range(-0.06..0.06);
            let phase = rng.random_range(-0.4..0.4);
            let cycles = rng.random_range(2.6..3.4);
            let tint: [f64; 3] = [
                rng.random_range(0.6..1.0),
                rng.random_range(0.6..1.0),
                rng.random_range(0.6..1.0),
            ];
            let background = rng.random_range(0.0..0.15);
            let (s, c) = angle.sin_cos();
            let freq = 2.0 * PI * cycles / size as f64;
            let mut noise = rng_from(derive_seed(seed ^ 0xA5A5, (class * per_class + sample) as u64));
            for ch_tint in tint {
                for y in 0..size {
                    for x in 0..size {
                        let (dx, dy) = (x as f64 - half, y as f64 - half);
                        let wave = 0.5 + 0.5 * (freq * (dx * c + dy * s) + phase).cos();
                        let v = background + (1.0 - background) * ch_tint * wave + noise.random_range(-0.04..0.04);
                        images.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(class as u32);
        }
    }
    ImageDataset::new("synthetic", (3, size, size), class_count, images, labels)
}

/// Seeded shuffling schedule for one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub drop_last: bool,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 128,
            drop_last: true,
        }
    }
}

impl BatchPlan {
    /// The permutation of `[0, count)` used in `epoch`.
    pub fn permutation(&self, count: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng_from(derive_path(self.seed, &[0xBA7C, epoch])));
        order
    }
}

/// Index batches for one epoch; the tail is dropped when `drop_last` is set.
pub fn iterate_batches(count: usize, plan: &BatchPlan, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if plan.batch_size > count {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {count}",
            plan.batch_size
        )));
    }
    Ok(plan
        .permutation(count, epoch)
        .chunks(plan.batch_size)
        .filter(|b| !plan.drop_last || b.len() == plan.batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}
