//! Forward and backward math for every differentiable operation.
//!
//! Convolution is implemented as cross-correlation (no kernel flip) via
//! per-item im2col plus a widened matmul. All reductions accumulate in
//! double precision; stored tensors keep their element type. Batch items
//! are processed in parallel, but every output element is produced by a
//! fixed sequential loop, so results do not depend on the thread count.

use rayon::prelude::*;

use super::simd;
use super::tensor::{Element, Shape4, Tensor4};
use crate::rng::SeededRng;
use crate::{Error, Result};

/// Probabilities are clamped at this floor before logs.
pub const PROB_CLAMP: f64 = 1e-7;

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
    /// im2col rows: in_c * kh * kw
    pub kk: usize,
    /// im2col cols: oh * ow
    pub nn: usize,
}

pub(crate) fn conv_dims(
    x: Shape4,
    kernel: Shape4,
    bias_len: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if kernel.c != x.c {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {} input channels, input has {}", kernel.c, x.c),
        ));
    }
    if kernel.h % 2 == 0 || kernel.w % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel dims must be odd, got {}x{}", kernel.h, kernel.w),
        ));
    }
    if stride < 1 {
        return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    if bias_len != kernel.n {
        return Err(Error::shape(
            "conv2d",
            format!("bias length {} != out channels {}", bias_len, kernel.n),
        ));
    }
    let he = x.h + 2 * pad;
    let we = x.w + 2 * pad;
    if he < kernel.h || we < kernel.w {
        return Err(Error::shape(
            "conv2d",
            format!(
                "padded input {}x{} smaller than kernel {}x{}",
                he, we, kernel.h, kernel.w
            ),
        ));
    }
    let oh = (he - kernel.h) / stride + 1;
    let ow = (we - kernel.w) / stride + 1;
    Ok(ConvDims {
        n: x.n,
        in_c: x.c,
        h: x.h,
        w: x.w,
        out_c: kernel.n,
        kh: kernel.h,
        kw: kernel.w,
        oh,
        ow,
        stride,
        pad,
        kk: x.c * kernel.h * kernel.w,
        nn: oh * ow,
    })
}

/// Expand one batch item into `cols[kk][nn]`, zero-filling padding.
fn im2col<E: Element>(x_item: &[E], d: &ConvDims, cols: &mut [f64]) {
    cols.fill(0.0);
    let hw = d.h * d.w;
    for ic in 0..d.in_c {
        let plane = &x_item[ic * hw..(ic + 1) * hw];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((ic * d.kh + ky) * d.kw + kx) * d.nn;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    if d.stride == 1 {
                        // contiguous x-range once clipped to the image
                        let lo = d.pad.saturating_sub(kx);
                        let hi = (d.w + d.pad - kx).min(d.ow);
                        if lo < hi {
                            let src = &plane[iy * d.w + lo + kx - d.pad..iy * d.w + hi + kx - d.pad];
                            simd::widen(&mut cols[row + oy * d.ow + lo..row + oy * d.ow + hi], src);
                        }
                    } else {
                        for ox in 0..d.ow {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                cols[row + oy * d.ow + ox] = plane[iy * d.w + ix as usize].to_f64();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter `dcols[kk][nn]` back into an item gradient, accumulating overlaps.
fn col2im_add(dcols: &[f64], d: &ConvDims, gx_item: &mut [f64]) {
    let hw = d.h * d.w;
    for ic in 0..d.in_c {
        let plane = &mut gx_item[ic * hw..(ic + 1) * hw];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((ic * d.kh + ky) * d.kw + kx) * d.nn;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    if d.stride == 1 {
                        let lo = d.pad.saturating_sub(kx);
                        let hi = (d.w + d.pad - kx).min(d.ow);
                        if lo < hi {
                            let dst = &mut plane[iy * d.w + lo + kx - d.pad..iy * d.w + hi + kx - d.pad];
                            simd::add_assign(dst, &dcols[row + oy * d.ow + lo..row + oy * d.ow + hi]);
                        }
                    } else {
                        for ox in 0..d.ow {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                plane[iy * d.w + ix as usize] += dcols[row + oy * d.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<E: Element>(
    x: &Tensor4<E>,
    kernel: &Tensor4<E>,
    bias: &[E],
    stride: usize,
    pad: usize,
) -> Result<Tensor4<E>> {
    let d = conv_dims(x.shape(), kernel.shape(), bias.len(), stride, pad)?;
    let mut out = Tensor4::zeros(Shape4::new(d.n, d.out_c, d.oh, d.ow));
    let kf: Vec<f64> = kernel.data().iter().map(|v| v.to_f64()).collect();
    let bf: Vec<f64> = bias.iter().map(|v| v.to_f64()).collect();
    let in_item = x.shape().item_len();
    let out_item = d.out_c * d.nn;
    let xs = x.data();
    out.data_mut()
        .par_chunks_mut(out_item)
        .enumerate()
        .for_each(|(item, out_chunk)| {
            let xi = &xs[item * in_item..(item + 1) * in_item];
            let mut cols = vec![0.0f64; d.kk * d.nn];
            im2col(xi, &d, &mut cols);
            let mut crow = vec![0.0f64; d.nn];
            for oc in 0..d.out_c {
                crow.fill(bf[oc]);
                let krow = &kf[oc * d.kk..(oc + 1) * d.kk];
                for (k, &a) in krow.iter().enumerate() {
                    simd::axpy(&mut crow, a, &cols[k * d.nn..(k + 1) * d.nn]);
                }
                for (o, &v) in out_chunk[oc * d.nn..(oc + 1) * d.nn].iter_mut().zip(&crow) {
                    *o = E::from_f64(v);
                }
            }
        });
    Ok(out)
}

/// Returns `(grad_x, grad_kernel, grad_bias)` as f64 buffers. `gout` must
/// have the forward output's length.
pub(crate) fn conv_backward<E: Element>(
    x: &Tensor4<E>,
    kernel: &Tensor4<E>,
    stride: usize,
    pad: usize,
    gout: &[E],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = conv_dims(x.shape(), kernel.shape(), kernel.shape().n, stride, pad)?;
    debug_assert_eq!(gout.len(), d.n * d.out_c * d.nn);
    let kf: Vec<f64> = kernel.data().iter().map(|v| v.to_f64()).collect();
    let in_item = x.shape().item_len();
    let out_item = d.out_c * d.nn;
    let xs = x.data();
    let gs = gout;
    let mut gx = vec![0.0f64; x.shape().len()];

    let partials: Vec<(Vec<f64>, Vec<f64>)> = gx
        .par_chunks_mut(in_item)
        .enumerate()
        .map(|(item, gx_chunk)| {
            let xi = &xs[item * in_item..(item + 1) * in_item];
            let mut g64 = vec![0.0f64; out_item];
            simd::widen(&mut g64, &gs[item * out_item..(item + 1) * out_item]);

            // input gradient: dcols = K^T * g, then col2im
            let mut dcols = vec![0.0f64; d.kk * d.nn];
            for oc in 0..d.out_c {
                let grow = &g64[oc * d.nn..(oc + 1) * d.nn];
                let krow = &kf[oc * d.kk..(oc + 1) * d.kk];
                for (k, &a) in krow.iter().enumerate() {
                    simd::axpy(&mut dcols[k * d.nn..(k + 1) * d.nn], a, grow);
                }
            }
            col2im_add(&dcols, &d, gx_chunk);

            // kernel and bias gradients for this item
            let mut cols = vec![0.0f64; d.kk * d.nn];
            im2col(xi, &d, &mut cols);
            let mut gk = vec![0.0f64; d.out_c * d.kk];
            let mut gb = vec![0.0f64; d.out_c];
            for oc in 0..d.out_c {
                let grow = &g64[oc * d.nn..(oc + 1) * d.nn];
                for k in 0..d.kk {
                    gk[oc * d.kk + k] = simd::dot(grow, &cols[k * d.nn..(k + 1) * d.nn]);
                }
                gb[oc] = simd::sum(grow);
            }
            (gk, gb)
        })
        .collect();

    // fold per-item partials in batch order
    let mut gk = vec![0.0f64; d.out_c * d.kk];
    let mut gb = vec![0.0f64; d.out_c];
    for (pk, pb) in partials {
        simd::add_assign(&mut gk, &pk);
        simd::add_assign(&mut gb, &pb);
    }
    Ok((gx, gk, gb))
}

// ---------------------------------------------------------------------------
// channel softmax

pub(crate) fn softmax_forward<E: Element>(x: &Tensor4<E>) -> Result<Tensor4<E>> {
    let s = x.shape();
    if s.c < 2 {
        return Err(Error::shape(
            "channel_softmax",
            format!("needs >= 2 channels, got {}", s.c),
        ));
    }
    let hw = s.h * s.w;
    let mut out = Tensor4::zeros(s);
    let xs = x.data();
    let os = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * hw;
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for c in 0..s.c {
                m = m.max(xs[base + c * hw + p].to_f64());
            }
            let mut sum = 0.0f64;
            for c in 0..s.c {
                sum += (xs[base + c * hw + p].to_f64() - m).exp();
            }
            for c in 0..s.c {
                let e = (xs[base + c * hw + p].to_f64() - m).exp();
                os[base + c * hw + p] = E::from_f64(e / sum);
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_backward<E: Element>(probs: &Tensor4<E>, gout: &[E]) -> Vec<f64> {
    let s = probs.shape();
    let hw = s.h * s.w;
    let ps = probs.data();
    let gs = gout;
    let mut gx = vec![0.0f64; s.len()];
    for n in 0..s.n {
        let base = n * s.c * hw;
        for p in 0..hw {
            let mut dotpg = 0.0f64;
            for c in 0..s.c {
                dotpg += ps[base + c * hw + p].to_f64() * gs[base + c * hw + p].to_f64();
            }
            for c in 0..s.c {
                let pv = ps[base + c * hw + p].to_f64();
                gx[base + c * hw + p] = pv * (gs[base + c * hw + p].to_f64() - dotpg);
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// pointwise and structural ops

pub(crate) fn relu_forward<E: Element>(x: &Tensor4<E>) -> Tensor4<E> {
    let mut out = x.clone();
    out.clear_grad();
    for v in out.data_mut() {
        if v.to_f64() <= 0.0 {
            *v = E::from_f64(0.0);
        }
    }
    out
}

pub(crate) fn relu_backward<E: Element>(x: &Tensor4<E>, gout: &[E]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(gout)
        .map(|(&v, &g)| if v.to_f64() > 0.0 { g.to_f64() } else { 0.0 })
        .collect()
}

pub(crate) fn maxpool_forward<E: Element>(x: &Tensor4<E>) -> (Tensor4<E>, Vec<u32>) {
    let s = x.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = Shape4::new(s.n, s.c, oh, ow);
    let mut out = Tensor4::zeros(out_shape);
    let mut argmax = vec![0u32; out_shape.len()];
    let xs = x.data();
    let os = out.data_mut();
    let mut o = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = (n * s.c + c) * s.h * s.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    // first occurrence in row-major window scan wins ties
                    let mut best_idx = plane + (2 * oy) * s.w + 2 * ox;
                    let mut best = xs[best_idx].to_f64();
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = plane + (2 * oy + dy) * s.w + 2 * ox + dx;
                        let v = xs[idx].to_f64();
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                    os[o] = xs[best_idx];
                    argmax[o] = best_idx as u32;
                    o += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool_backward<E: Element>(
    in_shape: Shape4,
    argmax: &[u32],
    gout: &[E],
) -> Vec<f64> {
    let mut gx = vec![0.0f64; in_shape.len()];
    for (&idx, &g) in argmax.iter().zip(gout) {
        gx[idx as usize] += g.to_f64();
    }
    gx
}

pub(crate) fn upsample_forward<E: Element>(x: &Tensor4<E>) -> Tensor4<E> {
    let s = x.shape();
    let out_shape = Shape4::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Tensor4::zeros(out_shape);
    let xs = x.data();
    let os = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = (n * s.c + c) * s.h * s.w;
            let dst = (n * s.c + c) * out_shape.h * out_shape.w;
            for y in 0..out_shape.h {
                for x_ in 0..out_shape.w {
                    os[dst + y * out_shape.w + x_] = xs[src + (y / 2) * s.w + x_ / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<E: Element>(in_shape: Shape4, gout: &[E]) -> Vec<f64> {
    let gs = gout;
    let os = Shape4::new(in_shape.n, in_shape.c, in_shape.h * 2, in_shape.w * 2);
    let mut gx = vec![0.0f64; in_shape.len()];
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let src = (n * in_shape.c + c) * os.h * os.w;
            let dst = (n * in_shape.c + c) * in_shape.h * in_shape.w;
            for y in 0..in_shape.h {
                for x_ in 0..in_shape.w {
                    let mut acc = 0.0f64;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += gs[src + (2 * y + dy) * os.w + 2 * x_ + dx].to_f64();
                        }
                    }
                    gx[dst + y * in_shape.w + x_] = acc;
                }
            }
        }
    }
    gx
}

pub(crate) fn concat_forward<E: Element>(a: &Tensor4<E>, b: &Tensor4<E>) -> Result<Tensor4<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape(
            "channel_concat",
            format!("non-channel dims differ: {} vs {}", sa, sb),
        ));
    }
    let out_shape = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut out = Tensor4::zeros(out_shape);
    let (ia, ib, io) = (sa.item_len(), sb.item_len(), out_shape.item_len());
    let os = out.data_mut();
    for n in 0..sa.n {
        os[n * io..n * io + ia].copy_from_slice(&a.data()[n * ia..(n + 1) * ia]);
        os[n * io + ia..(n + 1) * io].copy_from_slice(&b.data()[n * ib..(n + 1) * ib]);
    }
    Ok(out)
}

/// Split an upstream gradient back into the two concat inputs.
pub(crate) fn concat_backward<E: Element>(
    sa: Shape4,
    sb: Shape4,
    gout: &[E],
) -> (Vec<f64>, Vec<f64>) {
    let (ia, ib) = (sa.item_len(), sb.item_len());
    let io = ia + ib;
    let gs = gout;
    let mut ga = vec![0.0f64; sa.len()];
    let mut gb = vec![0.0f64; sb.len()];
    for n in 0..sa.n {
        simd::widen(&mut ga[n * ia..(n + 1) * ia], &gs[n * io..n * io + ia]);
        simd::widen(&mut gb[n * ib..(n + 1) * ib], &gs[n * io + ia..(n + 1) * io]);
    }
    (ga, gb)
}

pub(crate) fn add_forward<E: Element>(a: &Tensor4<E>, b: &Tensor4<E>) -> Result<Tensor4<E>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let mut out = Tensor4::zeros(a.shape());
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = E::from_f64(x.to_f64() + y.to_f64());
    }
    Ok(out)
}

pub(crate) fn scale_forward<E: Element>(x: &Tensor4<E>, s: f64) -> Tensor4<E> {
    let mut out = Tensor4::zeros(x.shape());
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o = E::from_f64(v.to_f64() * s);
    }
    out
}

/// `t*a + (1-t)*b`; exact at the endpoints.
pub(crate) fn lerp_forward<E: Element>(a: &Tensor4<E>, b: &Tensor4<E>, t: f64) -> Result<Tensor4<E>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "lerp",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let mut out = Tensor4::zeros(a.shape());
    let u = 1.0 - t;
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = E::from_f64(t * x.to_f64() + u * y.to_f64());
    }
    Ok(out)
}

pub(crate) fn permute_batch_forward<E: Element>(x: &Tensor4<E>, perm: &[usize]) -> Result<Tensor4<E>> {
    let s = x.shape();
    let mut seen = vec![false; s.n];
    if perm.len() != s.n || perm.iter().any(|&p| p >= s.n || std::mem::replace(&mut seen[p.min(s.n - 1)], true)) {
        return Err(Error::InvalidArgument(format!(
            "permute_batch: {:?} is not a permutation of 0..{}",
            perm, s.n
        )));
    }
    let item = s.item_len();
    let mut out = Tensor4::zeros(s);
    let os = out.data_mut();
    for (k, &p) in perm.iter().enumerate() {
        os[k * item..(k + 1) * item].copy_from_slice(&x.data()[p * item..(p + 1) * item]);
    }
    Ok(out)
}

pub(crate) fn permute_batch_backward<E: Element>(
    s: Shape4,
    perm: &[usize],
    gout: &[E],
) -> Vec<f64> {
    let item = s.item_len();
    let mut gx = vec![0.0f64; s.len()];
    for (k, &p) in perm.iter().enumerate() {
        for (g, &u) in gx[p * item..(p + 1) * item]
            .iter_mut()
            .zip(&gout[k * item..(k + 1) * item])
        {
            *g += u.to_f64();
        }
    }
    gx
}

/// Training-mode dropout; returns the keep mask used.
pub(crate) fn dropout_forward<E: Element>(
    x: &Tensor4<E>,
    rate: f64,
    rng: &mut SeededRng,
) -> (Tensor4<E>, Vec<u8>) {
    let scale = 1.0 / (1.0 - rate);
    let mut out = Tensor4::zeros(x.shape());
    let mut keep = vec![0u8; x.shape().len()];
    for ((o, &v), k) in out.data_mut().iter_mut().zip(x.data()).zip(keep.iter_mut()) {
        if rng.uniform() >= rate {
            *k = 1;
            *o = E::from_f64(v.to_f64() * scale);
        }
    }
    (out, keep)
}

pub(crate) fn dropout_backward<E: Element>(keep: &[u8], rate: f64, gout: &[E]) -> Vec<f64> {
    let scale = 1.0 / (1.0 - rate);
    keep.iter()
        .zip(gout)
        .map(|(&k, &g)| if k == 1 { g.to_f64() * scale } else { 0.0 })
        .collect()
}

// ---------------------------------------------------------------------------
// reductions and losses

pub(crate) fn weighted_sum_forward<E: Element>(x: &Tensor4<E>, w: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (&v, &wi) in x.data().iter().zip(w) {
        acc += v.to_f64() * wi;
    }
    acc
}

pub(crate) fn weighted_sum_backward(w: &[f64], gout: f64) -> Vec<f64> {
    w.iter().map(|&wi| wi * gout).collect()
}

/// Mean of `-ln(max(p, clamp))` over the flat indices in `idx`.
pub(crate) fn masked_nll_forward<E: Element>(probs: &Tensor4<E>, idx: &[u32]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let data = probs.data();
    let mut s = 0.0f64;
    for &i in idx {
        s -= data[i as usize].to_f64().max(PROB_CLAMP).ln();
    }
    s / idx.len() as f64
}

pub(crate) fn masked_nll_backward<E: Element>(
    probs: &Tensor4<E>,
    idx: &[u32],
    gout: f64,
    gx: &mut [f64],
) {
    if idx.is_empty() {
        return;
    }
    let data = probs.data();
    let k = gout / idx.len() as f64;
    for &i in idx {
        let p = data[i as usize].to_f64();
        if p >= PROB_CLAMP {
            gx[i as usize] -= k / p;
        }
    }
}

/// Mean of `-(ln(max(p, clamp)) + 2p/(1+p))` over annotated indices.
pub(crate) fn masked_nll_dice_forward<E: Element>(probs: &Tensor4<E>, idx: &[u32]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let data = probs.data();
    let mut s = 0.0f64;
    for &i in idx {
        let p = data[i as usize].to_f64();
        s -= p.max(PROB_CLAMP).ln() + 2.0 * p / (1.0 + p);
    }
    s / idx.len() as f64
}

pub(crate) fn masked_nll_dice_backward<E: Element>(
    probs: &Tensor4<E>,
    idx: &[u32],
    gout: f64,
    gx: &mut [f64],
) {
    if idx.is_empty() {
        return;
    }
    let data = probs.data();
    let k = gout / idx.len() as f64;
    for &i in idx {
        let p = data[i as usize].to_f64();
        let log_part = if p >= PROB_CLAMP { 1.0 / p } else { 0.0 };
        let dice_part = 2.0 / ((1.0 + p) * (1.0 + p));
        gx[i as usize] -= k * (log_part + dice_part);
    }
}

/// Per-sample `(a.b, |a|, |b|)` used by the cosine loss.
pub(crate) struct CosineAux {
    pub per_sample: Vec<(f64, f64, f64)>,
}

/// Batch mean of the negative cosine similarity of flattened samples.
pub(crate) fn cosine_forward<E: Element>(a: &Tensor4<E>, b: &Tensor4<E>) -> Result<(f64, CosineAux)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "cosine_loss",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let s = a.shape();
    let item = s.item_len();
    let mut per_sample = Vec::with_capacity(s.n);
    let mut total = 0.0f64;
    for n in 0..s.n {
        let av = &a.data()[n * item..(n + 1) * item];
        let bv = &b.data()[n * item..(n + 1) * item];
        let mut dot = 0.0f64;
        let mut na2 = 0.0f64;
        let mut nb2 = 0.0f64;
        for (&x, &y) in av.iter().zip(bv) {
            let (x, y) = (x.to_f64(), y.to_f64());
            dot += x * y;
            na2 += x * x;
            nb2 += y * y;
        }
        let (na, nb) = (na2.sqrt(), nb2.sqrt());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "cosine_loss: zero-norm input at sample {n}"
            )));
        }
        total -= dot / (na * nb);
        per_sample.push((dot, na, nb));
    }
    Ok((total / s.n as f64, CosineAux { per_sample }))
}

pub(crate) fn cosine_backward<E: Element>(
    a: &Tensor4<E>,
    b: &Tensor4<E>,
    aux: &CosineAux,
    gout: f64,
    ga: &mut [f64],
    gb: &mut [f64],
) {
    let s = a.shape();
    let item = s.item_len();
    let gn = gout / s.n as f64;
    for n in 0..s.n {
        let (dot, na, nb) = aux.per_sample[n];
        let av = &a.data()[n * item..(n + 1) * item];
        let bv = &b.data()[n * item..(n + 1) * item];
        // d(-dot/(|a||b|))/da = -b/(|a||b|) + dot*a/(|a|^3 |b|)
        let ka = dot / (na * na * na * nb);
        let kb = dot / (nb * nb * nb * na);
        let inv = 1.0 / (na * nb);
        for i in 0..item {
            let (x, y) = (av[i].to_f64(), bv[i].to_f64());
            ga[n * item + i] += gn * (ka * x - inv * y);
            gb[n * item + i] += gn * (kb * y - inv * x);
        }
    }
}
