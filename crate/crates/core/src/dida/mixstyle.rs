//! Instance-statistics mixing regulariser, applied after the first block of
//! single-source backbones during training.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, Float, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixStyleConfig {
    /// Mixing weights are drawn from Beta(alpha, alpha).
    pub alpha: f64,
    /// Probability that a given forward pass is mixed at all.
    pub prob: f64,
    /// Floor on the per-channel standard deviation.
    pub eps: f64,
}

impl Default for MixStyleConfig {
    fn default() -> Self {
        MixStyleConfig {
            alpha: 0.1,
            prob: 0.5,
            eps: 1e-6,
        }
    }
}

/// Training-mode MixStyle: with probability `prob`, re-style each sample with
/// a convex mix of its own and a random partner's channel statistics.
pub fn mixstyle<'t, T: Float>(
    x: Var<'t, T>,
    cfg: &MixStyleConfig,
    rng: &mut impl Rng,
) -> Result<Var<'t, T>> {
    if rng.random::<f64>() >= cfg.prob {
        return Ok(x);
    }
    let n = x.shape()[0];
    let beta = Beta::new(cfg.alpha, cfg.alpha)
        .map_err(|e| Error::Config(format!("mixstyle alpha {}: {e}", cfg.alpha)))?;
    let lambda: Vec<T> = (0..n)
        .map(|_| T::from_f64_lossy(beta.sample(rng)))
        .collect();
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    ops::mix_statistics(x, &partner, &lambda, T::from_f64_lossy(cfg.eps))
}
