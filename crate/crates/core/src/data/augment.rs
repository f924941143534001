//! Weak and strong views of a single grayscale image.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Maps an output pixel position `(x, y)` to the input position it samples:
/// `(a x + b y + c, d x + e y + f)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [f64; 6],
}

impl Affine {
    pub fn translation(dx: f64, dy: f64) -> Self {
        Affine {
            m: [1.0, 0.0, -dx, 0.0, 1.0, -dy],
        }
    }

    /// Counter-clockwise rotation by `theta` radians about the image centre.
    pub fn rotation(theta: f64, rows: usize, cols: usize) -> Self {
        let (cx, cy) = ((cols as f64 - 1.0) / 2.0, (rows as f64 - 1.0) / 2.0);
        let (s, c) = theta.sin_cos();
        Affine {
            m: [c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy],
        }
    }

    /// Horizontal shear about the centre row.
    pub fn shear_x(k: f64, rows: usize) -> Self {
        let cy = (rows as f64 - 1.0) / 2.0;
        Affine {
            m: [1.0, k, -k * cy, 0.0, 1.0, 0.0],
        }
    }
}

pub(crate) fn warp(img: &[u8], rows: usize, cols: usize, t: &Affine, fill: u8, bilinear: bool) -> Vec<u8> {
    let [a, b, c, d, e, f] = t.m;
    let px = |r: isize, cc: isize| -> f64 {
        if r < 0 || cc < 0 || r >= rows as isize || cc >= cols as isize {
            fill as f64
        } else {
            img[r as usize * cols + cc as usize] as f64
        }
    };
    let mut out = vec![fill; rows * cols];
    for y in 0..rows {
        for x in 0..cols {
            let sx = a * x as f64 + b * y as f64 + c;
            let sy = d * x as f64 + e * y as f64 + f;
            let v = if bilinear {
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (xi, yi) = (x0 as isize, y0 as isize);
                px(yi, xi) * (1.0 - fx) * (1.0 - fy)
                    + px(yi, xi + 1) * fx * (1.0 - fy)
                    + px(yi + 1, xi) * (1.0 - fx) * fy
                    + px(yi + 1, xi + 1) * fx * fy
            } else {
                px(sy.round() as isize, sx.round() as isize)
            };
            out[y * cols + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakAugment {
    /// Maximum translation in pixels along each axis.
    pub max_shift: usize,
    /// Horizontal flip with probability 0.5; off for digits.
    pub flip: bool,
}

impl Default for WeakAugment {
    fn default() -> Self {
        WeakAugment {
            max_shift: 2,
            flip: false,
        }
    }
}

pub fn weak_augment(img: &[u8], rows: usize, cols: usize, cfg: &WeakAugment, rng: &mut impl Rng) -> Vec<u8> {
    let s = cfg.max_shift as isize;
    let (dx, dy) = if s > 0 {
        (rng.random_range(-s as i64..=s as i64) as isize, rng.random_range(-s as i64..=s as i64) as isize)
    } else {
        (0, 0)
    };
    let flip = cfg.flip && rng.random_bool(0.5);
    let mut out = vec![0u8; rows * cols];
    for y in 0..rows as isize {
        for x in 0..cols as isize {
            let sx = if flip { cols as isize - 1 - (x - dx) } else { x - dx };
            let sy = y - dy;
            if sx >= 0 && sy >= 0 && sx < cols as isize && sy < rows as isize {
                out[y as usize * cols + x as usize] = img[sy as usize * cols + sx as usize];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongOp {
    InvertRegion,
    Posterize,
    Sharpness,
    Shear,
    Translate,
    Rotate,
    Contrast,
    Brightness,
}

pub const ALL_STRONG_OPS: [StrongOp; 8] = [
    StrongOp::InvertRegion,
    StrongOp::Posterize,
    StrongOp::Sharpness,
    StrongOp::Shear,
    StrongOp::Translate,
    StrongOp::Rotate,
    StrongOp::Contrast,
    StrongOp::Brightness,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongAugment {
    pub ops: Vec<StrongOp>,
    /// Operations drawn (with replacement) per image.
    pub num_ops: usize,
    /// Fraction of the image area covered by the erased patch; 0 disables it.
    pub erase_fraction: f64,
    pub erase_fill: u8,
}

impl Default for StrongAugment {
    fn default() -> Self {
        StrongAugment {
            ops: ALL_STRONG_OPS.to_vec(),
            num_ops: 2,
            erase_fraction: 0.25,
            erase_fill: 127,
        }
    }
}

fn point_map(img: &mut [u8], f: impl Fn(f64) -> f64) {
    for p in img.iter_mut() {
        *p = f(*p as f64).round().clamp(0.0, 255.0) as u8;
    }
}

fn apply_op(op: StrongOp, img: &[u8], rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut out = img.to_vec();
    match op {
        StrongOp::InvertRegion => {
            let h = rng.random_range(rows / 4..=rows / 2).max(1);
            let w = rng.random_range(cols / 4..=cols / 2).max(1);
            let (r0, c0) = (rng.random_range(0..=rows - h), rng.random_range(0..=cols - w));
            for r in r0..r0 + h {
                for p in &mut out[r * cols + c0..r * cols + c0 + w] {
                    *p = 255 - *p;
                }
            }
        }
        StrongOp::Posterize => {
            let bits = rng.random_range(2..=4u32);
            let mask = !((1u8 << (8 - bits)) - 1);
            out.iter_mut().for_each(|p| *p &= mask);
        }
        StrongOp::Sharpness => {
            let k = rng.random_range(0.05..1.95);
            for r in 1..rows.saturating_sub(1) {
                for c in 1..cols.saturating_sub(1) {
                    let mut acc = 4.0 * img[r * cols + c] as f64;
                    for (dr, dc) in [(0, 1), (2, 1), (1, 0), (1, 2)] {
                        acc += img[(r + dr - 1) * cols + c + dc - 1] as f64;
                    }
                    let smooth = acc / 8.0;
                    let v = smooth + k * (img[r * cols + c] as f64 - smooth);
                    out[r * cols + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        StrongOp::Shear => {
            out = warp(img, rows, cols, &Affine::shear_x(rng.random_range(-0.3..0.3), rows), 0, false);
        }
        StrongOp::Translate => {
            let lim = 0.3 * rows.min(cols) as f64;
            let (dx, dy) = (rng.random_range(-lim..lim), rng.random_range(-lim..lim));
            out = warp(img, rows, cols, &Affine::translation(dx.round(), dy.round()), 0, false);
        }
        StrongOp::Rotate => {
            let deg: f64 = rng.random_range(-30.0..30.0);
            out = warp(img, rows, cols, &Affine::rotation(deg.to_radians(), rows, cols), 0, true);
        }
        StrongOp::Contrast => {
            let k = rng.random_range(0.05..1.95);
            let mean = img.iter().map(|&p| p as f64).sum::<f64>() / img.len() as f64;
            point_map(&mut out, |p| mean + k * (p - mean));
        }
        StrongOp::Brightness => {
            let k = rng.random_range(0.05..1.95);
            point_map(&mut out, |p| k * p);
        }
    }
    out
}

pub fn strong_augment(img: &[u8], rows: usize, cols: usize, cfg: &StrongAugment, rng: &mut impl Rng) -> Vec<u8> {
    let mut out = img.to_vec();
    if !cfg.ops.is_empty() {
        for _ in 0..cfg.num_ops {
            let op = cfg.ops[rng.random_range(0..cfg.ops.len())];
            out = apply_op(op, &out, rows, cols, rng);
        }
    }
    if cfg.erase_fraction > 0.0 {
        let side = cfg.erase_fraction.sqrt();
        let h = ((rows as f64 * side).round() as usize).clamp(1, rows);
        let w = ((cols as f64 * side).round() as usize).clamp(1, cols);
        let (r0, c0) = (rng.random_range(0..=rows - h), rng.random_range(0..=cols - w));
        for r in r0..r0 + h {
            out[r * cols + c0..r * cols + c0 + w].fill(cfg.erase_fill);
        }
    }
    out
}
