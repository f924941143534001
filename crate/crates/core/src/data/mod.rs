//! Digit datasets: IDX ingestion, synthetic domain shifts, augmentation,
//! normalisation and mixed-domain batch sampling.

pub mod augment;
pub mod idx;
pub mod sampler;
pub mod synthetic;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{strong_augment, weak_augment, StrongAugment, WeakAugment};
pub use idx::{IdxError, Images};
pub use sampler::{sample_batch, AugmentConfig, DomainBatch, Sampler};
pub use synthetic::{make_synthetic_domain, Recipe};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub domain: String,
    pub images: Images,
    pub labels: Vec<u8>,
    pub split: Split,
}

/// Target-domain images. There is deliberately no label field.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub domain: String,
    pub images: Images,
}

impl LabeledSet {
    pub fn new(domain: impl Into<String>, images: Images, labels: Vec<u8>, split: Split, num_classes: usize) -> Result<Self> {
        let domain = domain.into();
        if images.count == 0 {
            return Err(Error::EmptyDataset(domain));
        }
        if labels.len() != images.count {
            return Err(IdxError::CountMismatch {
                images: images.count,
                labels: labels.len(),
            }
            .into());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes: num_classes,
            });
        }
        Ok(LabeledSet {
            domain,
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.count
    }

    pub fn is_empty(&self) -> bool {
        self.images.count == 0
    }

    /// Drop the labels, keeping images and domain tag.
    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            domain: self.domain.clone(),
            images: self.images.clone(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            domain: self.domain.clone(),
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

impl UnlabeledSet {
    pub fn new(domain: impl Into<String>, images: Images) -> Result<Self> {
        let domain = domain.into();
        if images.count == 0 {
            return Err(Error::EmptyDataset(domain));
        }
        Ok(UnlabeledSet { domain, images })
    }

    pub fn len(&self) -> usize {
        self.images.count
    }

    pub fn is_empty(&self) -> bool {
        self.images.count == 0
    }
}

pub fn load_labeled(
    images: &Path,
    labels: &Path,
    domain: &str,
    split: Split,
    num_classes: usize,
) -> Result<LabeledSet> {
    let (imgs, labels) = idx::read_idx(images, Some(labels))?;
    LabeledSet::new(domain, imgs, labels.expect("labels requested"), split, num_classes)
}

pub fn load_unlabeled(images: &Path, domain: &str) -> Result<UnlabeledSet> {
    let (imgs, _) = idx::read_idx(images, None)?;
    UnlabeledSet::new(domain, imgs)
}

/// Scaling to [0, 1], zero-padding to a square canvas and standardising.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
    pub size: usize,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: 0.5,
            std: 0.5,
            size: 32,
        }
    }
}

impl Normalization {
    pub fn value(&self, pixel: u8) -> f32 {
        ((pixel as f64 / 255.0 - self.mean) / self.std) as f32
    }

    pub fn denormalize(&self, v: f32) -> f64 {
        (v as f64 * self.std + self.mean) * 255.0
    }

    /// Write one `rows x cols` image, centred, into a `size x size` slot.
    pub fn write_image(&self, img: &[u8], rows: usize, cols: usize, out: &mut [f32]) -> Result<()> {
        let s = self.size;
        if rows > s || cols > s {
            return Err(Error::shape(
                "normalize",
                format!("{rows}x{cols} image does not fit a {s}x{s} canvas"),
            ));
        }
        let zero = self.value(0);
        out.fill(zero);
        let (top, left) = ((s - rows) / 2, (s - cols) / 2);
        for r in 0..rows {
            for c in 0..cols {
                out[(top + r) * s + left + c] = self.value(img[r * cols + c]);
            }
        }
        Ok(())
    }
}

/// Normalise a stack of images into an `[M, 1, size, size]` tensor.
pub fn normalize(images: &Images, norm: &Normalization) -> Result<Tensor<f32>> {
    let s = norm.size;
    let mut data = vec![0f32; images.count * s * s];
    for (i, out) in data.chunks_mut(s * s).enumerate() {
        norm.write_image(images.image(i), images.rows, images.cols, out)?;
    }
    Tensor::new([images.count, 1, s, s], data)
}

const SEGMENTS: [[bool; 7]; 10] = [
    // a (top), b (top right), c (bottom right), d (bottom), e (bottom left), f (top left), g (middle)
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

/// Seven-segment style digits on a 28x28 canvas with random placement,
/// stroke width and intensity. Labels cycle through 0..10.
pub fn toy_digits(n: usize, domain: &str, rng: &mut impl Rng) -> Result<LabeledSet> {
    let side = 28;
    let mut pixels = vec![0u8; n * side * side];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in pixels.chunks_mut(side * side).enumerate() {
        let digit = i % 10;
        labels.push(digit as u8);
        let w = rng.random_range(8..=12usize);
        let h = rng.random_range(14..=18usize);
        let t = rng.random_range(2..=3usize);
        let x0 = rng.random_range(4..=side - 4 - w);
        let y0 = rng.random_range(3..=side - 3 - h);
        let ink = rng.random_range(180..=255u8);
        let mid = y0 + h / 2;
        let mut fill = |r0: usize, r1: usize, c0: usize, c1: usize| {
            for r in r0..r1.min(side) {
                for c in c0..c1.min(side) {
                    img[r * side + c] = ink;
                }
            }
        };
        let seg = SEGMENTS[digit];
        if seg[0] {
            fill(y0, y0 + t, x0, x0 + w);
        }
        if seg[1] {
            fill(y0, mid + 1, x0 + w - t, x0 + w);
        }
        if seg[2] {
            fill(mid, y0 + h, x0 + w - t, x0 + w);
        }
        if seg[3] {
            fill(y0 + h - t, y0 + h, x0, x0 + w);
        }
        if seg[4] {
            fill(mid, y0 + h, x0, x0 + t);
        }
        if seg[5] {
            fill(y0, mid + 1, x0, x0 + t);
        }
        if seg[6] {
            fill(mid - t / 2, mid - t / 2 + t, x0, x0 + w);
        }
    }
    LabeledSet::new(domain, Images::new(n, side, side, pixels).unwrap(), labels, Split::Train, 10)
}
