//! Raw NCHW compute kernels on slices. The differentiable wrappers in
//! [`super::ops`] validate shapes and wire these into the tape.

use super::{matmul, Float};

/// Stride / zero padding / dilation of a 2-d window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            dilation,
        }
    }

    /// Padding that keeps the spatial size for an odd `kernel` at stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeom::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    /// Output length along one axis, or `None` if the window does not fit.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if kernel == 0 || self.stride == 0 || self.dilation == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Input row index for output row `o` and kernel tap `k`, if inside the image.
#[inline]
fn src_index(o: usize, k: usize, g: &ConvGeom, len: usize) -> Option<usize> {
    let i = (o * g.stride + k * g.dilation) as isize - g.padding as isize;
    (i >= 0 && (i as usize) < len).then_some(i as usize)
}

fn im2col<T: Float>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let hw_out = d.ho * d.wo;
    let g = &d.geom;
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.ho {
                    let seg = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    match src_index(oy, ki, g, d.h) {
                        None => seg.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * d.w..(iy + 1) * d.w];
                            for (ox, v) in seg.iter_mut().enumerate() {
                                *v = match src_index(ox, kj, g, d.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], d: &ConvDims, dx: &mut [T]) {
    let hw_out = d.ho * d.wo;
    let g = &d.geom;
    for ci in 0..d.cin {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.ho {
                    let Some(iy) = src_index(oy, ki, g, d.h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * d.w..(iy + 1) * d.w];
                    for ox in 0..d.wo {
                        if let Some(ix) = src_index(ox, kj, g, d.w) {
                            dst[ix] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(x: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let hw_out = d.ho * d.wo;
    let k = d.col_rows();
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * hw_out;
    let mut out = vec![T::zero(); d.n * out_stride];
    let mut col = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * hw_out]
    };
    for n in 0..d.n {
        let xn = &x[n * in_stride..(n + 1) * in_stride];
        let yn = &mut out[n * out_stride..(n + 1) * out_stride];
        if d.is_pointwise() {
            matmul(d.cout, k, hw_out, w, false, xn, false, T::zero(), yn);
        } else {
            im2col(xn, d, &mut col);
            matmul(d.cout, k, hw_out, w, false, &col, false, T::zero(), yn);
        }
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw_out = d.ho * d.wo;
    let k = d.col_rows();
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * hw_out;
    let mut dx = need_dx.then(|| vec![T::zero(); d.n * in_stride]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let pointwise = d.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { k * hw_out }];
    let mut dcol = vec![T::zero(); if pointwise || !need_dx { 0 } else { k * hw_out }];
    for n in 0..d.n {
        let xn = &x[n * in_stride..(n + 1) * in_stride];
        let gn = &gy[n * out_stride..(n + 1) * out_stride];
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, d, &mut col);
                &col
            };
            // dW (cout x k) += gY (cout x hw) * col^T (hw x k)
            matmul(d.cout, hw_out, k, gn, false, cols, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_stride..(n + 1) * in_stride];
            if pointwise {
                matmul(k, d.cout, hw_out, w, true, gn, false, T::zero(), dxn);
            } else {
                matmul(k, d.cout, hw_out, w, true, gn, false, T::zero(), &mut dcol);
                col2im(&dcol, d, dxn);
            }
        }
    }
    (dx, dw)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DepthwiseDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeom,
}

/// `out[n,c] = x[n,c] (*) k[n,c]`: every (sample, channel) pair has its own filter.
pub(crate) fn depthwise_forward<T: Float>(x: &[T], k: &[T], d: &DepthwiseDims) -> Vec<T> {
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let taps = d.kh * d.kw;
    let mut out = vec![T::zero(); d.n * d.c * plane_out];
    for nc in 0..d.n * d.c {
        let xp = &x[nc * plane_in..(nc + 1) * plane_in];
        let kp = &k[nc * taps..(nc + 1) * taps];
        let op = &mut out[nc * plane_out..(nc + 1) * plane_out];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let kv = kp[ki * d.kw + kj];
                for oy in 0..d.ho {
                    let Some(iy) = src_index(oy, ki, &d.geom, d.h) else {
                        continue;
                    };
                    for ox in 0..d.wo {
                        if let Some(ix) = src_index(ox, kj, &d.geom, d.w) {
                            op[oy * d.wo + ox] += kv * xp[iy * d.w + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Float>(
    x: &[T],
    k: &[T],
    gy: &[T],
    d: &DepthwiseDims,
) -> (Vec<T>, Vec<T>) {
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let taps = d.kh * d.kw;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    for nc in 0..d.n * d.c {
        let xp = &x[nc * plane_in..(nc + 1) * plane_in];
        let kp = &k[nc * taps..(nc + 1) * taps];
        let gp = &gy[nc * plane_out..(nc + 1) * plane_out];
        let dxp = &mut dx[nc * plane_in..(nc + 1) * plane_in];
        let dkp = &mut dk[nc * taps..(nc + 1) * taps];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let kv = kp[ki * d.kw + kj];
                let mut acc = T::zero();
                for oy in 0..d.ho {
                    let Some(iy) = src_index(oy, ki, &d.geom, d.h) else {
                        continue;
                    };
                    for ox in 0..d.wo {
                        if let Some(ix) = src_index(ox, kj, &d.geom, d.w) {
                            let g = gp[oy * d.wo + ox];
                            acc += g * xp[iy * d.w + ix];
                            dxp[iy * d.w + ix] += g * kv;
                        }
                    }
                }
                dkp[ki * d.kw + kj] = acc;
            }
        }
    }
    (dx, dk)
}

/// Non-overlapping `size x size` max pooling. Returns the output and, per
/// output element, the flat input index that won (first maximum on ties).
pub(crate) fn max_pool_forward<T: Float>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    size: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Per-channel mean and biased variance over (N, H, W).
pub(crate) fn channel_moments<T: Float>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let count = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            let p = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            s += p.iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for ni in 0..n {
            let p = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            v += p.iter().map(|&a| (a - m) * (a - m)).sum::<T>();
        }
        mean[ci] = m;
        var[ci] = v / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_len_matches_formula() {
        let g = ConvGeom::new(1, 0, 1);
        assert_eq!(g.out_len(3, 3), Some(1));
        assert_eq!(g.out_len(2, 3), None);
        assert_eq!(ConvGeom::new(2, 1, 1).out_len(5, 3), Some(3));
        assert_eq!(ConvGeom::same(3, 2).out_len(5, 3), Some(5));
        assert_eq!(ConvGeom::new(1, 2, 2).padding, ConvGeom::same(3, 2).padding);
    }

    #[test]
    fn pool_ties_pick_first() {
        let x = [1.0f32, 1.0, 1.0, 1.0];
        let (out, arg) = max_pool_forward(&x, (1, 1, 2, 2), 2);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
