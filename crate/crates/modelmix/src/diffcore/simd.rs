//! Dispatched inner loops for the convolution kernels.
//!
//! Each primitive has one `#[inline(always)]` body compiled twice: once for
//! the baseline target and once under `avx2`. The bodies contain no
//! fused-multiply-add and fix the summation order (strided accumulators),
//! so results are bitwise identical whichever path the runtime dispatch
//! picks and whatever the thread count is.

use super::tensor::Element;

#[inline(always)]
fn axpy_body(acc: &mut [f64], a: f64, xs: &[f64]) {
    for (c, &x) in acc.iter_mut().zip(xs) {
        *c += a * x;
    }
}

#[inline(always)]
fn add_assign_body(acc: &mut [f64], xs: &[f64]) {
    for (c, &x) in acc.iter_mut().zip(xs) {
        *c += x;
    }
}

#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0, 0.0, 0.0);
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

#[inline(always)]
fn sum_body(xs: &[f64]) -> f64 {
    let n = xs.len();
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0, 0.0, 0.0);
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        s0 += xs[j];
        s1 += xs[j + 1];
        s2 += xs[j + 2];
        s3 += xs[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += xs[j];
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn axpy(acc: &mut [f64], a: f64, xs: &[f64]) {
        super::axpy_body(acc, a, xs)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn add_assign(acc: &mut [f64], xs: &[f64]) {
        super::add_assign_body(acc, xs)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
        super::dot_body(a, b)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn sum(xs: &[f64]) -> f64 {
        super::sum_body(xs)
    }
}

#[cfg(target_arch = "x86_64")]
#[inline]
fn have_avx2() -> bool {
    std::arch::is_x86_feature_detected!("avx2")
}

pub(crate) fn axpy(acc: &mut [f64], a: f64, xs: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if have_avx2() {
        // SAFETY: avx2 presence just checked.
        return unsafe { avx2::axpy(acc, a, xs) };
    }
    axpy_body(acc, a, xs)
}

pub(crate) fn add_assign(acc: &mut [f64], xs: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if have_avx2() {
        // SAFETY: avx2 presence just checked.
        return unsafe { avx2::add_assign(acc, xs) };
    }
    add_assign_body(acc, xs)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if have_avx2() {
        // SAFETY: avx2 presence just checked.
        return unsafe { avx2::dot(a, b) };
    }
    dot_body(a, b)
}

pub(crate) fn sum(xs: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if have_avx2() {
        // SAFETY: avx2 presence just checked.
        return unsafe { avx2::sum(xs) };
    }
    sum_body(xs)
}

/// Widen a slice of elements into an f64 buffer.
pub(crate) fn widen<E: Element>(dst: &mut [f64], src: &[E]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s.to_f64();
    }
}
