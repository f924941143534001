//! Differentiable operators. Each validates shapes, computes its value with
//! the kernels in [`super::kernels`] and records a pullback on the tape.

use super::kernels::{self, ConvDims, ConvGeom, DepthwiseDims};
use super::{matmul, Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn tensor<T: Float>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced a consistent shape")
}

fn same_tape<'t, T: Float>(a: &Var<'t, T>, b: &Var<'t, T>) {
    debug_assert!(std::ptr::eq(a.tape(), b.tape()), "vars from different tapes");
}

pub fn add<'t, T: Float>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_tape(&a, &b);
    let (av, bv) = (a.value(), b.value());
    if av.shape() != bv.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", av.shape(), bv.shape()),
        ));
    }
    let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
    let out = tensor(av.shape().to_vec(), data);
    Ok(a.tape().record(out, &[a, b], |g| vec![Some(g.clone()), Some(g.clone())]))
}

pub fn mul<'t, T: Float>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_tape(&a, &b);
    let (av, bv) = (a.value(), b.value());
    if av.shape() != bv.shape() {
        return Err(Error::shape(
            "mul",
            format!("{:?} vs {:?}", av.shape(), bv.shape()),
        ));
    }
    let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
    let out = tensor(av.shape().to_vec(), data);
    Ok(a.tape().record(out, &[a, b], move |g| {
        let ga = g.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
        let gb = g.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
        vec![
            Some(tensor(g.shape().to_vec(), ga)),
            Some(tensor(g.shape().to_vec(), gb)),
        ]
    }))
}

/// Multiply by a constant.
pub fn scale<T: Float>(a: Var<'_, T>, factor: T) -> Var<'_, T> {
    let out = a.value().map(|v| v * factor);
    a.tape()
        .record(out, &[a], move |g| vec![Some(g.map(|v| v * factor))])
}

/// Sum of all elements, as a 0-d tensor.
pub fn sum<T: Float>(a: Var<'_, T>) -> Var<'_, T> {
    let av = a.value();
    let shape = av.shape().to_vec();
    let out = Tensor::scalar(av.sum());
    a.tape()
        .record(out, &[a], move |g| vec![Some(Tensor::full(shape.clone(), g.item()))])
}

pub fn relu<T: Float>(x: Var<'_, T>) -> Var<'_, T> {
    let xv = x.value();
    let out = xv.map(|v| if v > T::zero() { v } else { T::zero() });
    x.tape().record(out, &[x], move |g| {
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(tensor(g.shape().to_vec(), data))]
    })
}

pub fn reshape<'t, T: Float>(x: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
    let xv = x.value();
    let from = xv.shape().to_vec();
    let out = (*xv).clone().reshape(shape.to_vec())?;
    Ok(x.tape().record(out, &[x], move |g| {
        vec![Some(g.clone().reshape(from.clone()).expect("same numel"))]
    }))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn swap_axes_raw<T: Float>(t: &Tensor<T>, a: usize, b: usize) -> Tensor<T> {
    let shape = t.shape();
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let in_strides = strides(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(a, b);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut data = Vec::with_capacity(t.len());
    for _ in 0..t.len() {
        let src: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        data.push(t.data()[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    tensor(out_shape, data)
}

/// Exchange two axes (a transpose, materialised).
pub fn swap_axes<T: Float>(x: Var<'_, T>, a: usize, b: usize) -> Result<Var<'_, T>> {
    let xv = x.value();
    let rank = xv.shape().len();
    if a >= rank || b >= rank {
        return Err(Error::shape(
            "swap_axes",
            format!("axes ({a}, {b}) out of range for {:?}", xv.shape()),
        ));
    }
    let out = swap_axes_raw(&xv, a, b);
    Ok(x.tape()
        .record(out, &[x], move |g| vec![Some(swap_axes_raw(g, a, b))]))
}

/// Concatenate NCHW tensors along channels.
pub fn concat_channels<'t, T: Float>(xs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of no tensors".into()))?;
    let values: Vec<_> = xs.iter().map(|v| v.value()).collect();
    let (n, _, h, w) = values[0].dims4("concat_channels")?;
    let mut chans = Vec::with_capacity(xs.len());
    for v in &values {
        let (vn, vc, vh, vw) = v.dims4("concat_channels")?;
        if (vn, vh, vw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", values[0].shape(), v.shape()),
            ));
        }
        chans.push(vc);
    }
    let total: usize = chans.iter().sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for ni in 0..n {
        for (v, &c) in values.iter().zip(&chans) {
            data.extend_from_slice(&v.data()[ni * c * hw..(ni + 1) * c * hw]);
        }
    }
    let out = tensor(vec![n, total, h, w], data);
    Ok(first.tape().record(out, xs, move |g| {
        let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
        let gd = g.data();
        let mut off = 0;
        for _ in 0..n {
            for (gi, &c) in grads.iter_mut().zip(&chans) {
                gi.extend_from_slice(&gd[off..off + c * hw]);
                off += c * hw;
            }
        }
        grads
            .into_iter()
            .zip(&chans)
            .map(|(d, &c)| Some(tensor(vec![n, c, h, w], d)))
            .collect()
    }))
}

/// Repeat a `[C, kh, kw]` (or `[C, 1, kh, kw]`) filter bank for each of `n`
/// samples, giving `[n, C, kh, kw]`. The pullback sums over samples.
pub fn broadcast_batch<T: Float>(k: Var<'_, T>, n: usize) -> Result<Var<'_, T>> {
    let kv = k.value();
    let (c, kh, kw) = match kv.shape() {
        &[c, kh, kw] | &[c, 1, kh, kw] => (c, kh, kw),
        s => {
            return Err(Error::shape(
                "broadcast_batch",
                format!("expected [C, kh, kw] or [C, 1, kh, kw], got {s:?}"),
            ))
        }
    };
    let per = c * kh * kw;
    let mut data = Vec::with_capacity(n * per);
    for _ in 0..n {
        data.extend_from_slice(kv.data());
    }
    let src_shape = kv.shape().to_vec();
    let out = tensor(vec![n, c, kh, kw], data);
    Ok(k.tape().record(out, &[k], move |g| {
        let mut acc = vec![T::zero(); per];
        for chunk in g.data().chunks(per) {
            for (a, &v) in acc.iter_mut().zip(chunk) {
                *a += v;
            }
        }
        vec![Some(tensor(src_shape.clone(), acc))]
    }))
}

/// 2-d cross-correlation, `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, no bias.
pub fn conv2d<'t, T: Float>(x: Var<'t, T>, w: Var<'t, T>, geom: ConvGeom) -> Result<Var<'t, T>> {
    same_tape(&x, &w);
    let (xv, wv) = (x.value(), w.value());
    let (n, cin, h, wd) = xv.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = wv.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {:?} has {cin} channels but weight {:?} expects {wcin}",
                xv.shape(),
                wv.shape()
            ),
        ));
    }
    let (ho, wo) = match (geom.out_len(h, kh), geom.out_len(wd, kw)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} with {geom:?} does not fit input {h}x{wd}"),
            ))
        }
    };
    let dims = ConvDims {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho,
        wo,
        geom,
    };
    let out = tensor(
        vec![n, cout, ho, wo],
        kernels::conv2d_forward(xv.data(), wv.data(), &dims),
    );
    let (need_dx, need_dw) = (x.requires_grad(), w.requires_grad());
    Ok(x.tape().record(out, &[x, w], move |g| {
        let (dx, dw) =
            kernels::conv2d_backward(xv.data(), wv.data(), g.data(), &dims, need_dx, need_dw);
        vec![
            dx.map(|d| tensor(xv.shape().to_vec(), d)),
            dw.map(|d| tensor(wv.shape().to_vec(), d)),
        ]
    }))
}

/// Depthwise convolution where every sample carries its own filter bank:
/// `x: [N, C, H, W]`, `k: [N, C, kh, kw]`, stride 1.
pub fn depthwise_conv2d_per_sample<'t, T: Float>(
    x: Var<'t, T>,
    k: Var<'t, T>,
    padding: usize,
    dilation: usize,
) -> Result<Var<'t, T>> {
    same_tape(&x, &k);
    let (xv, kv) = (x.value(), k.value());
    let (n, c, h, w) = xv.dims4("depthwise_conv2d_per_sample")?;
    let (kn, kc, kh, kw) = kv.dims4("depthwise_conv2d_per_sample")?;
    if (kn, kc) != (n, c) {
        return Err(Error::shape(
            "depthwise_conv2d_per_sample",
            format!("input {:?} vs kernel bank {:?}", xv.shape(), kv.shape()),
        ));
    }
    let geom = ConvGeom::new(1, padding, dilation);
    let (ho, wo) = match (geom.out_len(h, kh), geom.out_len(w, kw)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::shape(
                "depthwise_conv2d_per_sample",
                format!("kernel {kh}x{kw} with {geom:?} does not fit input {h}x{w}"),
            ))
        }
    };
    let dims = DepthwiseDims {
        n,
        c,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        geom,
    };
    let out = tensor(
        vec![n, c, ho, wo],
        kernels::depthwise_forward(xv.data(), kv.data(), &dims),
    );
    Ok(x.tape().record(out, &[x, k], move |g| {
        let (dx, dk) = kernels::depthwise_backward(xv.data(), kv.data(), g.data(), &dims);
        vec![
            Some(tensor(xv.shape().to_vec(), dx)),
            Some(tensor(kv.shape().to_vec(), dk)),
        ]
    }))
}

/// `y = x W^T + b` with `x: [N, Din]`, `w: [Dout, Din]`, `b: [Dout]`.
pub fn linear<'t, T: Float>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), w.value());
    let (n, din) = xv.dims2("linear")?;
    let (dout, wdin) = wv.dims2("linear")?;
    if wdin != din {
        return Err(Error::shape(
            "linear",
            format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
        ));
    }
    let mut y = vec![T::zero(); n * dout];
    if let Some(b) = &b {
        let bv = b.value();
        if bv.shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} vs {dout} outputs", bv.shape()),
            ));
        }
        for row in y.chunks_mut(dout) {
            row.copy_from_slice(bv.data());
        }
    }
    matmul(n, din, dout, xv.data(), false, wv.data(), true, T::one(), &mut y);
    let out = tensor(vec![n, dout], y);
    let mut parents = vec![x, w];
    parents.extend(b);
    let has_bias = b.is_some();
    let (need_dx, need_dw) = (x.requires_grad(), w.requires_grad());
    Ok(x.tape().record(out, &parents, move |g| {
        let dx = need_dx.then(|| {
            let mut d = vec![T::zero(); n * din];
            matmul(n, dout, din, g.data(), false, wv.data(), false, T::zero(), &mut d);
            tensor(vec![n, din], d)
        });
        let dw = need_dw.then(|| {
            let mut d = vec![T::zero(); dout * din];
            matmul(dout, n, din, g.data(), true, xv.data(), false, T::zero(), &mut d);
            tensor(vec![dout, din], d)
        });
        let mut grads = vec![dx, dw];
        if has_bias {
            let mut db = vec![T::zero(); dout];
            for row in g.data().chunks(dout) {
                for (a, &v) in db.iter_mut().zip(row) {
                    *a += v;
                }
            }
            grads.push(Some(tensor(vec![dout], db)));
        }
        grads
    }))
}

/// Spatial mean per (n, c): `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn global_avg_pool<T: Float>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4("global_avg_pool")?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data = xv
        .data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    let out = tensor(vec![n, c, 1, 1], data);
    Ok(x.tape().record(out, &[x], move |g| {
        let mut d = Vec::with_capacity(n * c * hw);
        for &gv in g.data() {
            d.extend(std::iter::repeat_n(gv * inv, hw));
        }
        vec![Some(tensor(vec![n, c, h, w], d))]
    }))
}

/// Non-overlapping `size x size` max pooling (trailing rows/cols dropped).
pub fn max_pool2d<T: Float>(x: Var<'_, T>, size: usize) -> Result<Var<'_, T>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4("max_pool2d")?;
    if size == 0 || h < size || w < size {
        return Err(Error::shape(
            "max_pool2d",
            format!("window {size} on {h}x{w}"),
        ));
    }
    let (out, arg) = kernels::max_pool_forward(xv.data(), (n, c, h, w), size);
    let out = tensor(vec![n, c, h / size, w / size], out);
    let len = xv.len();
    let in_shape = xv.shape().to_vec();
    Ok(x.tape().record(out, &[x], move |g| {
        let mut d = vec![T::zero(); len];
        for (&gv, &i) in g.data().iter().zip(&arg) {
            d[i] += gv;
        }
        vec![Some(tensor(in_shape.clone(), d))]
    }))
}

/// Statistics source for [`batch_norm2d`].
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a, T> {
    /// Normalise with the batch's own per-channel moments.
    Batch,
    /// Normalise with stored running moments.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Output of [`batch_norm2d`]; `batch_mean` / `batch_var` (biased) are set in
/// batch mode so the caller can update running statistics.
pub struct BnOutput<'t, T> {
    pub out: Var<'t, T>,
    pub batch_mean: Option<Vec<T>>,
    pub batch_var: Option<Vec<T>>,
}

pub fn batch_norm2d<'t, T: Float>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    stats: BnStats<'_, T>,
    eps: T,
) -> Result<BnOutput<'t, T>> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let dims @ (n, c, h, w) = xv.dims4("batch_norm2d")?;
    if gv.shape() != [c] || bv.shape() != [c] {
        return Err(Error::shape(
            "batch_norm2d",
            format!(
                "{c} channels but gamma {:?}, beta {:?}",
                gv.shape(),
                bv.shape()
            ),
        ));
    }
    let hw = h * w;
    let (mean, var, batch) = match stats {
        BnStats::Batch => {
            let (m, v) = kernels::channel_moments(xv.data(), dims);
            (m, v, true)
        }
        BnStats::Running { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape("batch_norm2d", "running stats length"));
            }
            (mean.to_vec(), var.to_vec(), false)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xv.len()];
    let mut y = vec![T::zero(); xv.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let (m, s, g, b) = (mean[ci], inv_std[ci], gv.data()[ci], bv.data()[ci]);
            for i in off..off + hw {
                let xh = (xv.data()[i] - m) * s;
                xhat[i] = xh;
                y[i] = g * xh + b;
            }
        }
    }
    let out = tensor(vec![n, c, h, w], y);
    let count = T::from_usize(n * hw).unwrap();
    let need_dx = x.requires_grad();
    let out = x.tape().record(out, &[x, gamma, beta], move |g| {
        let gd = g.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    dgamma[ci] += gd[i] * xhat[i];
                    dbeta[ci] += gd[i];
                }
            }
        }
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); gd.len()];
            for ci in 0..c {
                let k = gv.data()[ci] * inv_std[ci];
                let (mg, mgx) = (dbeta[ci] / count, dgamma[ci] / count);
                for ni in 0..n {
                    let off = (ni * c + ci) * hw;
                    for i in off..off + hw {
                        dx[i] = if batch {
                            k * (gd[i] - mg - xhat[i] * mgx)
                        } else {
                            k * gd[i]
                        };
                    }
                }
            }
            tensor(vec![n, c, h, w], dx)
        });
        vec![
            dx,
            Some(tensor(vec![c], dgamma)),
            Some(tensor(vec![c], dbeta)),
        ]
    });
    Ok(BnOutput {
        out,
        batch_mean: batch.then_some(mean),
        batch_var: batch.then_some(var),
    })
}

/// Numerically stable log-softmax of each row of `[N, K]`.
pub fn log_softmax_rows<T: Float>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = logits.dims2("log_softmax")?;
    let mut out = Vec::with_capacity(n * k);
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new([n, k], out)
}

/// `-sum_n weight_n * log softmax(logits_n)[label_n]` as a 0-d tensor.
/// `weights` default to `1/N` each. Weights are constants (no gradient).
pub fn softmax_cross_entropy<'t, T: Float>(
    logits: Var<'t, T>,
    labels: &[usize],
    weights: Option<&[T]>,
) -> Result<Var<'t, T>> {
    let lv = logits.value();
    let (n, k) = lv.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let weights: Vec<T> = match weights {
        Some(w) if w.len() != n => {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{n} rows but {} weights", w.len()),
            ))
        }
        Some(w) => w.to_vec(),
        None => vec![T::one() / T::from_usize(n.max(1)).unwrap(); n],
    };
    let logp = log_softmax_rows(&lv)?;
    let mut loss = T::zero();
    for (i, (&l, &wt)) in labels.iter().zip(&weights).enumerate() {
        loss -= wt * logp.data()[i * k + l];
    }
    let labels = labels.to_vec();
    let out = Tensor::scalar(loss);
    Ok(logits.tape().record(out, &[logits], move |g| {
        let gs = g.item();
        let mut d = Vec::with_capacity(n * k);
        for (i, row) in logp.data().chunks(k).enumerate() {
            let wt = weights[i] * gs;
            for (j, &lp) in row.iter().enumerate() {
                let p = lp.exp();
                let y = if j == labels[i] { T::one() } else { T::zero() };
                d.push(wt * (p - y));
            }
        }
        vec![Some(tensor(vec![n, k], d))]
    }))
}

/// Feature-statistics mixing with detached statistics:
/// `out_i = sig_mix * (x_i - mu_i) / sig_i + mu_mix` where
/// `mu_mix = lam_i mu_i + (1 - lam_i) mu_{p(i)}` and likewise for `sig`.
pub fn mix_statistics<'t, T: Float>(
    x: Var<'t, T>,
    partner: &[usize],
    lambda: &[T],
    eps: T,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4("mixstyle")?;
    if partner.len() != n || lambda.len() != n || partner.iter().any(|&p| p >= n) {
        return Err(Error::shape(
            "mixstyle",
            format!("batch {n}, {} partners, {} lambdas", partner.len(), lambda.len()),
        ));
    }
    let hw = h * w;
    let count = T::from_usize(hw).unwrap();
    let mut mu = vec![T::zero(); n * c];
    let mut sig = vec![T::zero(); n * c];
    for (i, p) in xv.data().chunks(hw).enumerate() {
        let m = p.iter().copied().sum::<T>() / count;
        let v = p.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / count;
        mu[i] = m;
        sig[i] = v.sqrt().max(eps);
    }
    let mut scale = vec![T::zero(); n * c];
    let mut data = Vec::with_capacity(xv.len());
    for ni in 0..n {
        let (lam, j) = (lambda[ni], partner[ni]);
        for ci in 0..c {
            let (a, b) = (ni * c + ci, j * c + ci);
            let mu_mix = lam * mu[a] + (T::one() - lam) * mu[b];
            let sig_mix = lam * sig[a] + (T::one() - lam) * sig[b];
            let s = sig_mix / sig[a];
            scale[a] = s;
            let plane = &xv.data()[a * hw..(a + 1) * hw];
            data.extend(plane.iter().map(|&v| (v - mu[a]) * s + mu_mix));
        }
    }
    let out = tensor(vec![n, c, h, w], data);
    Ok(x.tape().record(out, &[x], move |g| {
        let d = g
            .data()
            .chunks(hw)
            .zip(&scale)
            .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
            .collect();
        vec![Some(tensor(vec![n, c, h, w], d))]
    }))
}

/// Convenience for tests and tools: the value on a fresh tape.
pub fn eval_on_fresh_tape<T: Float>(
    f: impl for<'t> Fn(&'t Tape<T>) -> Result<Var<'t, T>>,
) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let v = f(&tape)?;
    Ok((*v.value()).clone())
}
