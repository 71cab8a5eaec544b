//! Image datasets: IDX and CIFAR-10 ingestion, gray-level quantization,
//! deterministic splits and a seeded affine-digit generator.

mod affine;
mod cifar;
mod idx;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tensor;

pub use affine::{apply_affine, digit_bbox, make_affine_digits, AffineParams, AffineRanges};
pub use cifar::read_cifar_batch;
pub use idx::{parse_idx, read_idx, write_idx_images, write_idx_labels, Idx};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad IDX magic {found:#010x}")]
    BadMagic { found: u32 },
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("IDX dimensions {0:?} overflow")]
    DimOverflow(Vec<u32>),
    #[error("gray levels must be in [2, 256], got {0}")]
    LevelsOutOfRange(usize),
    #[error("canvas {canvas} is smaller than source {height}x{width}")]
    CanvasTooSmall { canvas: usize, height: usize, width: usize },
    #[error("split fractions sum to {0}, expected 1")]
    BadFractions(f64),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Quantized images stored N×H×W×C, with labels and split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub levels: usize,
    pub num_classes: usize,
    pub splits: Vec<Split>,
}

impl ImageDataset {
    /// Builds a dataset with every example tagged as training data.
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u8>,
        (height, width, channels): (usize, usize, usize),
        levels: usize,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if !(2..=256).contains(&levels) {
            return Err(DataError::LevelsOutOfRange(levels));
        }
        let per = height * width * channels;
        if per == 0 || images.len() != labels.len() * per {
            return Err(DataError::Inconsistent(format!(
                "{} pixel bytes for {} labels of {height}x{width}x{channels}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&v) = images.iter().find(|&&v| usize::from(v) >= levels) {
            return Err(DataError::Inconsistent(format!("pixel {v} >= {levels} levels")));
        }
        if let Some(&l) = labels.iter().find(|&&l| usize::from(l) >= num_classes) {
            return Err(DataError::Inconsistent(format!("label {l} >= {num_classes} classes")));
        }
        let splits = vec![Split::Train; labels.len()];
        Ok(Self { images, labels, height, width, channels, levels, num_classes, splits })
    }

    /// Reads an MNIST-style pair of IDX files.
    pub fn load_mnist(images: &Path, labels: &Path) -> Result<Self, DataError> {
        let (n, h, w, pixels) = match read_idx(images)? {
            Idx::Images { count, height, width, pixels } => (count, height, width, pixels),
            Idx::Labels(_) => {
                return Err(DataError::Inconsistent(format!("{} holds labels", images.display())))
            }
        };
        let labels = match read_idx(labels)? {
            Idx::Labels(l) => l,
            Idx::Images { .. } => {
                return Err(DataError::Inconsistent(format!("{} holds images", labels.display())))
            }
        };
        if labels.len() != n {
            return Err(DataError::Inconsistent(format!("{n} images but {} labels", labels.len())));
        }
        Self::new(pixels, labels, (h, w, 1), 256, 10)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.pixels_per_image();
        &self.images[i * per..(i + 1) * per]
    }

    /// Indices tagged with `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Keeps the listed examples, in order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut images = Vec::with_capacity(rows.len() * self.pixels_per_image());
        for &r in rows {
            images.extend_from_slice(self.image(r));
        }
        Self {
            images,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            splits: rows.iter().map(|&r| self.splits[r]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self { images: Vec::new(), labels: Vec::new(), splits: Vec::new(), ..*self }
    }

    /// NCHW batch with pixels scaled to [0, 1].
    pub fn batch(&self, rows: &[usize]) -> Tensor {
        let scale = 1.0 / (self.levels - 1) as f64;
        self.gather(rows, |v| f64::from(v) * scale)
    }

    /// NCHW batch of raw level indices.
    pub fn batch_levels(&self, rows: &[usize]) -> Tensor {
        self.gather(rows, f64::from)
    }

    fn gather(&self, rows: &[usize], f: impl Fn(u8) -> f64) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = Vec::with_capacity(rows.len() * h * w * c);
        for &r in rows {
            let img = self.image(r);
            for ch in 0..c {
                for p in 0..h * w {
                    data.push(f(img[p * c + ch]));
                }
            }
        }
        Tensor::new(vec![rows.len(), c, h, w], data).expect("non-empty batch")
    }

    /// Maps 256-level pixels to `levels` gray levels via `floor(v·L/256)`.
    pub fn quantize(&self, levels: usize) -> Result<Self, DataError> {
        if !(2..=256).contains(&levels) {
            return Err(DataError::LevelsOutOfRange(levels));
        }
        if self.levels != 256 {
            return Err(DataError::Inconsistent(format!(
                "quantize expects 256-level input, dataset has {}",
                self.levels
            )));
        }
        let mut out = self.clone();
        for v in &mut out.images {
            *v = quantize_value(*v, levels);
        }
        out.levels = levels;
        Ok(out)
    }

    /// Halves height and width by averaging 2×2 blocks (rounding half up).
    pub fn downscale2(&self) -> Self {
        let (h, w, c) = (self.height / 2, self.width / 2, self.channels);
        let mut images = Vec::with_capacity(self.len() * h * w * c);
        for i in 0..self.len() {
            let img = self.image(i);
            let at = |y: usize, x: usize, ch: usize| u32::from(img[(y * self.width + x) * c + ch]);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let s = at(2 * y, 2 * x, ch)
                            + at(2 * y, 2 * x + 1, ch)
                            + at(2 * y + 1, 2 * x, ch)
                            + at(2 * y + 1, 2 * x + 1, ch);
                        images.push(((s + 2) / 4) as u8);
                    }
                }
            }
        }
        Self { images, height: h, width: w, labels: self.labels.clone(), splits: self.splits.clone(), ..self.clone_header() }
    }

    /// Tags examples train/val/test by a seeded permutation.
    ///
    /// Split sizes are `round(n·f_train)` and `round(n·(f_train+f_val)) −
    /// round(n·f_train)`; the remainder is test.
    pub fn split_deterministic(&self, fractions: [f64; 3], seed: u64) -> Result<Self, DataError> {
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
            return Err(DataError::BadFractions(total));
        }
        let n = self.len();
        let n_train = (n as f64 * fractions[0]).round() as usize;
        let n_train_val = ((n as f64 * (fractions[0] + fractions[1])).round() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = self.clone();
        for (rank, &i) in order.iter().enumerate() {
            out.splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Ok(out)
    }
}

/// File names of the MNIST digits under a data directory.
pub const MNIST_IMAGES: &str = "mnist-10k-images-idx3-ubyte";
pub const MNIST_LABELS: &str = "mnist-10k-labels-idx1-ubyte";

/// MNIST from `dir`, downscaled to 14×14 and split 80/10/10 with
/// `split_seed`, still at 256 levels.
pub fn desk_mnist_256(dir: &Path, split_seed: u64) -> Result<ImageDataset, DataError> {
    ImageDataset::load_mnist(&dir.join(MNIST_IMAGES), &dir.join(MNIST_LABELS))?
        .downscale2()
        .split_deterministic([0.8, 0.1, 0.1], split_seed)
}

/// Desk-scale MNIST: 14×14 at `levels` gray levels.
pub fn desk_mnist(dir: &Path, levels: usize, split_seed: u64) -> Result<ImageDataset, DataError> {
    desk_mnist_256(dir, split_seed)?.quantize(levels)
}

pub fn quantize_value(v: u8, levels: usize) -> u8 {
    (usize::from(v) * levels / 256) as u8
}
