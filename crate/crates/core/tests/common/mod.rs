//! Brute-force reference implementations shared by the integration tests.
//! Everything here works on flat `f64` slices with explicit index arithmetic
//! and never calls into the library's operators.

#![allow(dead_code)]

use dida::dida::{DidaConfig, GeneratorMode};
use dida::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn randomize_store(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for id in store.trainable_ids() {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

/// Cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    wt: &[f64],
    [cout, wcin, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
    dil: usize,
) -> (Vec<f64>, [usize; 4]) {
    assert_eq!(cin, wcin);
    let ho = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let wo = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i * dil) as isize - pad as isize;
                                let ix = (xx * stride + j * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + c) * h + iy as usize) * w + ix as usize];
                                acc += xv * wt[((o * cin + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * cout + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    (out, [n, cout, ho, wo])
}

/// `out[n,c] = x[n,c] (*) k[n,c]`, spatial size preserved.
pub fn depthwise_ref(x: &[f64], [n, c, h, w]: [usize; 4], k: &[f64], ks: usize, pad: usize, dil: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..ks {
                        for j in 0..ks {
                            let iy = (y + i * dil) as isize - pad as isize;
                            let ix = (xx + j * dil) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[((b * c + ch) * h + iy as usize) * w + ix as usize]
                                * k[((b * c + ch) * ks + i) * ks + j];
                        }
                    }
                    out[((b * c + ch) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn weight<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .value()
        .data()
}

/// Residual of the dynamic module for ONE sample `x: [c, h, w]`, written as
/// nested loops straight from the module's definition. Returns
/// `[out_channels, h_out, w_out]` flattened.
pub fn dida_residual_one(cfg: &DidaConfig, store: &ParamStore<f64>, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let c = cfg.in_channels.unwrap();
    let out = cfg.out_channels.unwrap_or(c);
    let r = c / cfg.reduction;
    let ks = cfg.kernel_size;
    let nb = cfg.dilations.len();
    let per_branch = out / nb;
    let s = cfg.stride;
    let (ho, wo) = ((h - 1) / s + 1, (w - 1) / s + 1);

    let matvec = |m: &[f64], v: &[f64], rows: usize, cols: usize| -> Vec<f64> {
        (0..rows).map(|i| (0..cols).map(|j| m[i * cols + j] * v[j]).sum()).collect()
    };

    let w_red = weight(store, "dida.reduce.weight");
    // F[j, y, x] = sum_c W[j, c] x[c, y, x]
    let mut f = vec![0.0; r * h * w];
    for j in 0..r {
        for p in 0..h * w {
            f[j * h * w + p] = (0..c).map(|ch| w_red[j * c + ch] * x[ch * h * w + p]).sum();
        }
    }
    let mean: Vec<f64> = (0..c).map(|ch| x[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();

    let w_exp = weight(store, "dida.expand.weight");
    let mut result = vec![0.0; out * ho * wo];
    for (bi, &d) in cfg.dilations.iter().enumerate() {
        // kernel[j, t] for reduced channel j and tap t (row-major over ks x ks)
        let kernel: Vec<f64> = match cfg.generator_mode {
            GeneratorMode::Dynamic => {
                let red_name = if cfg.share_reduction {
                    "dida.reduce.weight".to_string()
                } else {
                    format!("dida.generator.{bi}.reduce.weight")
                };
                let q = matvec(weight(store, &red_name), &mean, r, c);
                let g = weight(store, &format!("dida.generator.{bi}.weight"));
                (0..r).flat_map(|j| (0..ks * ks).map(move |t| (j, t))).map(|(j, t)| g[t] * q[j]).collect()
            }
            GeneratorMode::StaticCnn => weight(store, &format!("dida.branch.{bi}.kernel")).to_vec(),
        };
        let pad = d * (ks - 1) / 2;
        let mut o = vec![0.0; r * h * w];
        for j in 0..r {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (y + ky * d) as isize - pad as isize;
                            let ix = (xx + kx * d) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += kernel[j * ks * ks + ky * ks + kx] * f[(j * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    o[(j * h + y) * w + xx] = acc;
                }
            }
        }
        for oc in 0..per_branch {
            for y in 0..ho {
                for xx in 0..wo {
                    let v: f64 = (0..r).map(|j| w_exp[oc * r + j] * o[(j * h + y * s) * w + xx * s]).sum();
                    result[((bi * per_branch + oc) * ho + y) * wo + xx] = v;
                }
            }
        }
    }
    result
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
