//! K x B + B mixed-domain batches: `B` labelled images from each source
//! domain and `B` target images seen through a weak and a strong view.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{strong_augment, weak_augment, StrongAugment, WeakAugment};
use super::{LabeledSet, Normalization, UnlabeledSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub weak: WeakAugment,
    pub strong: StrongAugment,
    /// Apply the weak augmentation to source images as well.
    #[serde(default = "yes")]
    pub augment_source: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub source_x: Tensor<f32>,
    pub source_y: Vec<usize>,
    /// Index of each source sample within its own domain.
    pub source_ids: Vec<usize>,
    pub target_weak: Tensor<f32>,
    pub target_strong: Tensor<f32>,
    /// Target image index behind row `i` of both target views.
    pub target_ids: Vec<usize>,
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
    replace: bool,
}

impl Cursor {
    fn new(len: usize, b: usize, what: &str, rng: &mut impl Rng) -> Self {
        let replace = b > len;
        if replace {
            warn!("batch size {b} exceeds the {len} images of {what}; sampling with replacement");
        }
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Cursor { order, pos: 0, replace }
    }

    fn take(&mut self, b: usize, rng: &mut impl Rng) -> Vec<usize> {
        if self.replace {
            let n = self.order.len();
            return (0..b).map(|_| rng.random_range(0..n)).collect();
        }
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let k = (b - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + k]);
            self.pos += k;
        }
        out
    }
}

/// Stateful sampler. Source streams cycle through reshuffled permutations;
/// an epoch is one pass over the target set.
pub struct Sampler<'a> {
    sources: &'a [LabeledSet],
    target: &'a UnlabeledSet,
    b: usize,
    aug: AugmentConfig,
    norm: Normalization,
    source_cursors: Vec<Cursor>,
    target_cursor: Cursor,
}

impl<'a> Sampler<'a> {
    pub fn new(
        sources: &'a [LabeledSet],
        target: &'a UnlabeledSet,
        b: usize,
        aug: AugmentConfig,
        norm: Normalization,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if b == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if sources.is_empty() {
            return Err(Error::InvalidArgument("at least one source domain is required".into()));
        }
        for s in sources {
            if s.is_empty() {
                return Err(Error::EmptyDataset(s.domain.clone()));
            }
        }
        if target.is_empty() {
            return Err(Error::EmptyDataset(target.domain.clone()));
        }
        let source_cursors = sources
            .iter()
            .map(|s| Cursor::new(s.len(), b, &s.domain, rng))
            .collect();
        let target_cursor = Cursor::new(target.len(), b, &target.domain, rng);
        Ok(Sampler {
            sources,
            target,
            b,
            aug,
            norm,
            source_cursors,
            target_cursor,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.b
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.target.len().div_ceil(self.b)
    }

    pub fn next_batch(&mut self, rng: &mut impl Rng) -> Result<DomainBatch> {
        let (b, s) = (self.b, self.norm.size);
        let k = self.sources.len();
        let plane = s * s;
        let mut source_x = vec![0f32; k * b * plane];
        let mut source_y = Vec::with_capacity(k * b);
        let mut source_ids = Vec::with_capacity(k * b);
        let mut slot = 0;
        for (set, cursor) in self.sources.iter().zip(&mut self.source_cursors) {
            let (rows, cols) = (set.images.rows, set.images.cols);
            for i in cursor.take(b, rng) {
                let img = set.images.image(i);
                let view;
                let pixels = if self.aug.augment_source {
                    view = weak_augment(img, rows, cols, &self.aug.weak, rng);
                    &view[..]
                } else {
                    img
                };
                self.norm
                    .write_image(pixels, rows, cols, &mut source_x[slot * plane..(slot + 1) * plane])?;
                source_y.push(set.labels[i] as usize);
                source_ids.push(i);
                slot += 1;
            }
        }
        let target_ids = self.target_cursor.take(b, rng);
        let (rows, cols) = (self.target.images.rows, self.target.images.cols);
        let mut weak = vec![0f32; b * plane];
        let mut strong = vec![0f32; b * plane];
        for (j, &i) in target_ids.iter().enumerate() {
            let img = self.target.images.image(i);
            let w = weak_augment(img, rows, cols, &self.aug.weak, rng);
            let st = strong_augment(img, rows, cols, &self.aug.strong, rng);
            self.norm
                .write_image(&w, rows, cols, &mut weak[j * plane..(j + 1) * plane])?;
            self.norm
                .write_image(&st, rows, cols, &mut strong[j * plane..(j + 1) * plane])?;
        }
        Ok(DomainBatch {
            source_x: Tensor::new([k * b, 1, s, s], source_x)?,
            source_y,
            source_ids,
            target_weak: Tensor::new([b, 1, s, s], weak)?,
            target_strong: Tensor::new([b, 1, s, s], strong)?,
            target_ids,
        })
    }
}

/// One batch from a freshly shuffled sampler.
pub fn sample_batch(
    sources: &[LabeledSet],
    target: &UnlabeledSet,
    b: usize,
    aug: &AugmentConfig,
    norm: &Normalization,
    rng: &mut impl Rng,
) -> Result<DomainBatch> {
    Sampler::new(sources, target, b, aug.clone(), *norm, rng)?.next_batch(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_digits;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn epoch_covers_the_target_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let src = vec![toy_digits(7, "s", &mut rng).unwrap()];
        let tgt = toy_digits(12, "t", &mut rng).unwrap().unlabeled();
        let mut s = Sampler::new(&src, &tgt, 4, AugmentConfig::default(), Normalization::default(), &mut rng).unwrap();
        assert_eq!(s.steps_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(&mut rng).unwrap().target_ids).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_batch_samples_with_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let src = vec![toy_digits(3, "s", &mut rng).unwrap()];
        let tgt = toy_digits(2, "t", &mut rng).unwrap().unlabeled();
        let b = sample_batch(&src, &tgt, 5, &AugmentConfig::default(), &Normalization::default(), &mut rng).unwrap();
        assert_eq!(b.source_y.len(), 5);
        assert!(b.target_ids.iter().all(|&i| i < 2));
    }
}
