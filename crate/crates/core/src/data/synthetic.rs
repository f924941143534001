//! Pixel-level domain shifts applied to a labelled digit set.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::augment::{warp, Affine};
use super::{Images, LabeledSet};
use crate::error::{Error, Result};

/// One transform step. Recipes compose with `+`, applied left to right,
/// e.g. `invert+noise(0.2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Recipe {
    Invert,
    /// Additive Gaussian noise with standard deviation `sigma` on the [0, 1] scale.
    Noise(f64),
    /// Rotation by the given angle in degrees about the image centre.
    Rotate(f64),
    /// Brightened horizontal bands, `period` rows per light/dark cycle.
    Stripes(usize),
    Chain(Vec<Recipe>),
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('+').map(str::trim).collect();
        if parts.len() > 1 {
            return parts
                .into_iter()
                .map(Recipe::from_str)
                .collect::<Result<Vec<_>>>()
                .map(Recipe::Chain);
        }
        let bad = || Error::Config(format!("unknown synthetic recipe `{s}`"));
        let s = parts[0];
        if s == "invert" {
            return Ok(Recipe::Invert);
        }
        let (name, arg) = s
            .strip_suffix(')')
            .and_then(|body| body.split_once('('))
            .ok_or_else(bad)?;
        let num = |a: &str| a.trim().parse::<f64>().map_err(|_| bad());
        match name.trim() {
            "noise" => {
                let sigma = num(arg)?;
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
                }
                Ok(Recipe::Noise(sigma))
            }
            "rotate" => Ok(Recipe::Rotate(num(arg)?)),
            "stripes" => match arg.trim().parse::<usize>() {
                Ok(p) if p >= 2 => Ok(Recipe::Stripes(p)),
                _ => Err(Error::Config(format!("stripes period must be an integer >= 2, got `{arg}`"))),
            },
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Recipe::Invert => write!(f, "invert"),
            Recipe::Noise(s) => write!(f, "noise({s})"),
            Recipe::Rotate(a) => write!(f, "rotate({a})"),
            Recipe::Stripes(p) => write!(f, "stripes({p})"),
            Recipe::Chain(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{p}")?;
                }
                Ok(())
            }
        }
    }
}

impl TryFrom<String> for Recipe {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Recipe> for String {
    fn from(r: Recipe) -> String {
        r.to_string()
    }
}

fn apply(recipe: &Recipe, img: &mut [u8], rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
    match recipe {
        Recipe::Invert => img.iter_mut().for_each(|p| *p = 255 - *p),
        Recipe::Noise(sigma) => {
            if *sigma == 0.0 {
                return;
            }
            for p in img.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *p = (*p as f64 + 255.0 * sigma * z).round().clamp(0.0, 255.0) as u8;
            }
        }
        Recipe::Rotate(deg) => {
            let out = warp(img, rows, cols, &Affine::rotation(deg.to_radians(), rows, cols), 0, true);
            img.copy_from_slice(&out);
        }
        Recipe::Stripes(period) => {
            for r in 0..rows {
                if r % period < period / 2 {
                    for p in &mut img[r * cols..(r + 1) * cols] {
                        *p = p.saturating_add(96);
                    }
                }
            }
        }
        Recipe::Chain(parts) => parts.iter().for_each(|p| apply(p, img, rows, cols, rng)),
    }
}

/// A shifted copy of `base`: same labels, transformed pixels, domain tagged
/// `<base>/<recipe>`. Image `i` draws its randomness from a stream keyed by
/// `(seed, i)`, so results do not depend on processing order.
pub fn make_synthetic_domain(base: &LabeledSet, recipe: &Recipe, seed: u64) -> LabeledSet {
    let (rows, cols) = (base.images.rows, base.images.cols);
    let mut pixels = base.images.pixels.clone();
    for (i, img) in pixels.chunks_mut(rows * cols).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        apply(recipe, img, rows, cols, &mut rng);
    }
    LabeledSet {
        domain: format!("{}/{recipe}", base.domain),
        images: Images {
            count: base.images.count,
            rows,
            cols,
            pixels,
        },
        labels: base.labels.clone(),
        split: base.split,
    }
}
