//! Datasets: MNIST IDX files, CIFAR-10 binary batches, synthetic blobs,
//! and seeded batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / self.std[channel]
    }

    pub fn invert(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    /// `[N, C, H, W]`, already normalized.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        images: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        normalization: Normalization,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return config_err(format!("images must be [N, C, H, W], got {:?}", images.shape()));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{num_classes}")));
        }
        if normalization.mean.len() != images.shape()[1] {
            return config_err("normalization does not match the channel count");
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one example.
    pub fn example_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        self.subset(0..n.min(self.len()), self.split)
    }

    /// Examples `range`, relabelled as `split`. Used to carve a held-out
    /// set from one synthetic draw.
    pub fn subset(&self, range: std::ops::Range<usize>, split: Split) -> Self {
        let end = range.end.min(self.len());
        let idx: Vec<usize> = (range.start.min(end)..end).collect();
        Self {
            images: self.images.gather_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
            normalization: self.normalization.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: bytes.len(),
            message: format!("header truncated, needed 4 bytes at {offset}"),
        })
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("image payload truncated, header promises {need} bytes"),
        });
    }
    if bytes.len() > need {
        return Err(Error::Format {
            offset: need,
            message: format!("{} trailing bytes after image payload", bytes.len() - need),
        });
    }
    Ok((n, rows, cols, &bytes[16..]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            offset: bytes.len().min(8 + n),
            message: format!("label payload has {} bytes, header says {n}", bytes.len() - 8),
        });
    }
    Ok(&bytes[8..])
}

/// Decodes MNIST-style images and labels already in memory.
pub fn decode_mnist<T: Scalar>(image_bytes: &[u8], label_bytes: &[u8], split: Split) -> Result<Dataset<T>> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("label count {} does not match image count {n}", labels.len()),
        });
    }
    let norm = Normalization {
        mean: vec![MNIST_MEAN],
        std: vec![MNIST_STD],
    };
    let data = pixels
        .iter()
        .map(|&p| T::from_f64_lossy(norm.apply(0, p as f64 / 255.0)))
        .collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels = labels.iter().map(|&l| l as usize).collect();
    Dataset::new(images, labels, 10, split, norm)
}

pub fn load_mnist_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset<T>> {
    decode_mnist(&read(images_path.as_ref())?, &read(labels_path.as_ref())?, split)
}

/// Loads `train-*` or `t10k-*` files from an MNIST directory.
pub fn load_mnist_dir<T: Scalar>(dir: impl AsRef<Path>, split: Split) -> Result<Dataset<T>> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = dir.as_ref();
    load_mnist_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

pub fn decode_cifar10<T: Scalar>(files: &[Vec<u8>], split: Split) -> Result<Dataset<T>> {
    let norm = Normalization {
        mean: CIFAR_MEAN.to_vec(),
        std: CIFAR_STD.to_vec(),
    };
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for bytes in files {
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                offset: bytes.len() - bytes.len() % CIFAR_RECORD,
                message: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(record[0] as usize);
            for (i, &p) in record[1..].iter().enumerate() {
                data.push(T::from_f64_lossy(norm.apply(i / 1024, p as f64 / 255.0)));
            }
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10, split, norm)
}

pub fn load_cifar10_bin<T: Scalar, P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset<T>> {
    let files = paths.iter().map(|p| read(p.as_ref())).collect::<Result<Vec<_>>>()?;
    decode_cifar10(&files, split)
}

/// Gaussian blobs with unit noise around orthonormal class directions.
/// `margin` is the distance from each class mean to the bisecting hyperplane
/// of any two classes, in units of the noise standard deviation.
pub fn synthetic_blobs<T: Scalar>(
    seed: u64,
    n: usize,
    num_classes: usize,
    shape: [usize; 3],
    margin: f64,
) -> Result<Dataset<T>> {
    let d: usize = shape.iter().product();
    if num_classes < 2 || num_classes > d {
        return config_err(format!("need 2 <= classes <= {d}, got {num_classes}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Gram-Schmidt over Gaussian draws
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while dirs.len() < num_classes {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &dirs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            dirs.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    // |m_i - m_j| = scale * sqrt(2) = 2 * margin
    let scale = margin * std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % num_classes;
        labels.push(y);
        for &u in &dirs[y] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(T::from_f64_lossy(scale * u + z));
        }
    }
    let images = Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?;
    Dataset::new(images, labels, num_classes, Split::Train, Normalization::identity(shape[0]))
}

/// Random crop after zero padding, and horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Augment {
    pub crop_padding: usize,
    pub flip: bool,
}

impl Augment {
    pub fn is_off(&self) -> bool {
        self.crop_padding == 0 && !self.flip
    }

    fn apply<T: Scalar>(&self, images: &mut Tensor<T>, rng: &mut ChaCha8Rng) {
        let s = images.shape().to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        let p = self.crop_padding as i64;
        let mut buf = vec![T::zero(); c * h * w];
        for img in images.data_mut().chunks_exact_mut(c * h * w) {
            let dy = if p > 0 { rng.random_range(-p..=p) as isize } else { 0 };
            let dx = if p > 0 { rng.random_range(-p..=p) as isize } else { 0 };
            let flip = self.flip && rng.random_bool(0.5);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let sx0 = if flip { w - 1 - x } else { x };
                        let sx = sx0 as isize + dx;
                        buf[(ch * h + y) * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            img[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
            img.copy_from_slice(&buf);
        }
    }
}

/// Example order for one epoch: a pure function of `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Shuffled mini-batches; the last batch may be short.
pub struct Batches<'a, T> {
    data: &'a Dataset<T>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    augment: Augment,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut images = self.data.images.gather_rows(idx);
        if !self.augment.is_off() {
            self.augment.apply(&mut images, &mut self.rng);
        }
        Some(Batch {
            images,
            labels: idx.iter().map(|&i| self.data.labels[i]).collect(),
        })
    }
}

impl<T> Batches<'_, T> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

pub fn batches<T: Scalar>(
    data: &Dataset<T>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Batches<'_, T>> {
    batches_augmented(data, batch_size, seed, epoch, Augment::default())
}

pub fn batches_augmented<T: Scalar>(
    data: &Dataset<T>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    augment: Augment,
) -> Result<Batches<'_, T>> {
    if batch_size == 0 {
        return config_err("batch size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a116);
    rng.set_stream(epoch as u64);
    Ok(Batches {
        data,
        order: epoch_permutation(data.len(), seed, epoch),
        batch_size,
        pos: 0,
        augment,
        rng,
    })
}

/// Number of batches per epoch.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}
