//! MNIST (IDX) and CIFAR-10 (binary) readers, normalization and batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_CROP_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

/// Raw 8-bit images in CHW order with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub shape: [usize; 3],
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Whether training batches get random crops and flips.
    pub fn is_augmented(&self) -> bool {
        self.kind == DatasetKind::Cifar10
    }

    /// The first `n` examples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            kind: self.kind,
            shape: self.shape,
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX image file and its label file.
pub fn parse_mnist(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let (n, rows, cols) = (be_u32(images, 4)? as usize, be_u32(images, 8)? as usize, be_u32(images, 12)? as usize);
    let body = &images[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "IDX image body has {} bytes, header promises {}",
            body.len(),
            n * rows * cols
        )));
    }
    let lmagic = be_u32(labels, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {lmagic:#010x}")));
    }
    let ln = be_u32(labels, 4)? as usize;
    let lbody = &labels[8..];
    if ln != n || lbody.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", lbody.len())));
    }
    if let Some(bad) = lbody.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("label {bad} out of range")));
    }
    Ok(Dataset {
        kind: DatasetKind::Mnist,
        shape: [1, rows, cols],
        pixels: body.to_vec(),
        labels: lbody.to_vec(),
        num_classes: 10,
    })
}

/// Reads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = fs::read(dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = fs::read(dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    parse_mnist(&images, &labels)
}

/// Parses one CIFAR-10 binary batch (3073-byte records).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 file length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(Dataset {
        kind: DatasetKind::Cifar10,
        shape: [3, 32, 32],
        pixels,
        labels,
        num_classes: 10,
    })
}

/// Reads `data_batch_{1..5}.bin` or `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut all: Option<Dataset> = None;
    for f in files {
        let part = parse_cifar10(&fs::read(dir.join(f))?)?;
        match all.as_mut() {
            Some(d) => {
                d.pixels.extend(part.pixels);
                d.labels.extend(part.labels);
            }
            None => all = Some(part),
        }
    }
    all.ok_or_else(|| Error::Format("no CIFAR-10 batches".into()))
}

pub fn load(kind: DatasetKind, dir: &Path, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => load_mnist(dir, split),
        DatasetKind::Cifar10 => load_cifar10(dir, split),
    }
}

/// Per-channel affine normalization to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of the raw pixel values (scaled to [0, 1]) of `train`.
    pub fn fit(train: &Dataset) -> Self {
        let [c, h, w] = train.shape;
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..train.len() {
            for (ch, px) in train.image(i).chunks(plane).enumerate() {
                for &p in px {
                    let v = p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (train.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(1e-12).sqrt())
            .collect();
        Self { mean, std }
    }
}

/// Random crop (zero padding after normalization) and horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Augment {
    dy: isize,
    dx: isize,
    flip: bool,
}

fn write_image(out: &mut [f64], img: &[u8], shape: [usize; 3], norm: &Normalization, aug: Option<Augment>) {
    let [c, h, w] = shape;
    for ch in 0..c {
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        for y in 0..h {
            for x in 0..w {
                let dst = &mut out[(ch * h + y) * w + x];
                let (sy, sx) = match aug {
                    None => (y as isize, x as isize),
                    Some(a) => {
                        let xx = if a.flip { w - 1 - x } else { x };
                        (y as isize + a.dy, xx as isize + a.dx)
                    }
                };
                *dst = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    0.0
                } else {
                    (img[(ch * h + sy as usize) * w + sx as usize] as f64 / 255.0 - m) / s
                };
            }
        }
    }
}

/// Normalized images and labels for `indices`. With an `rng`, CIFAR-10
/// batches are augmented; MNIST is never augmented.
pub fn make_batch(
    data: &Dataset,
    indices: &[usize],
    norm: &Normalization,
    rng: Option<&mut dyn rand::RngCore>,
) -> (FloatTensor, Vec<usize>) {
    let n = data.image_len();
    let mut buf = vec![0.0; indices.len() * n];
    let pad = CIFAR_CROP_PAD as isize;
    let mut rng = rng.filter(|_| data.is_augmented());
    for (slot, &i) in indices.iter().enumerate() {
        let aug = rng.as_mut().map(|r| Augment {
            dy: r.gen_range(-pad..=pad),
            dx: r.gen_range(-pad..=pad),
            flip: r.gen_bool(0.5),
        });
        write_image(&mut buf[slot * n..(slot + 1) * n], data.image(i), data.shape, norm, aug);
    }
    let [c, h, w] = data.shape;
    let x = FloatTensor::new(vec![indices.len(), c, h, w], buf).expect("batch buffer sized to shape");
    (x, indices.iter().map(|&i| data.labels[i] as usize).collect())
}

/// A fresh random permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_pair(n: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n as u32, 2, 3] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend((0..n * 6).map(|i| (i * 37 % 256) as u8));
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, n as u32] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend((0..n).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn parses_synthetic_idx() {
        let (img, lab) = idx_pair(4);
        let d = parse_mnist(&img, &lab).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.shape, [1, 2, 3]);
        assert_eq!(d.image(1), &img[16 + 6..16 + 12]);
        assert_eq!(d.labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_corrupted_magic_and_truncation() {
        let (mut img, lab) = idx_pair(3);
        let (good, _) = idx_pair(3);
        img[3] = 0x04;
        assert!(matches!(parse_mnist(&img, &lab), Err(Error::Format(_))));
        assert!(parse_mnist(&good[..good.len() - 1], &lab).is_err());
        assert!(parse_mnist(&good[..10], &lab).is_err());
        assert!(parse_mnist(&good, &lab[..lab.len() - 1]).is_err());
    }

    #[test]
    fn parses_cifar_records() {
        let mut bytes = Vec::new();
        for r in 0..3u8 {
            bytes.push(r);
            bytes.extend(std::iter::repeat(r * 10).take(CIFAR_PIXELS));
        }
        let d = parse_cifar10(&bytes).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.labels, vec![0, 1, 2]);
        assert!(d.image(2).iter().all(|&p| p == 20));
        assert!(parse_cifar10(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn normalization_zero_mean_unit_variance() {
        let (img, lab) = idx_pair(20);
        let d = parse_mnist(&img, &lab).unwrap();
        let norm = Normalization::fit(&d);
        let idx: Vec<usize> = (0..d.len()).collect();
        let (x, labels) = make_batch(&d, &idx, &norm, None);
        let m: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
        let v: f64 = x.data().iter().map(|a| (a - m) * (a - m)).sum::<f64>() / x.len() as f64;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-9);
        assert_eq!(labels.len(), 20);
    }

    #[test]
    fn mnist_batches_ignore_augmentation() {
        let (img, lab) = idx_pair(5);
        let d = parse_mnist(&img, &lab).unwrap();
        let norm = Normalization::fit(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = make_batch(&d, &[0, 1], &norm, Some(&mut rng)).0;
        let b = make_batch(&d, &[0, 1], &norm, None).0;
        assert_eq!(a, b);
    }

    #[test]
    fn cifar_augmentation_keeps_shape_and_flips() {
        let mut bytes = vec![3u8];
        bytes.extend((0..CIFAR_PIXELS).map(|i| (i % 32) as u8));
        let d = parse_cifar10(&bytes).unwrap();
        let norm = Normalization {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        let mut out = vec![0.0; CIFAR_PIXELS];
        write_image(&mut out, d.image(0), d.shape, &norm, Some(Augment { dy: 0, dx: 0, flip: true }));
        assert_eq!(out[0], 31.0 / 255.0);
        write_image(&mut out, d.image(0), d.shape, &norm, Some(Augment { dy: 0, dx: 4, flip: false }));
        assert_eq!(out[31], 0.0);
        assert_eq!(out[0], 4.0 / 255.0);
    }
}
