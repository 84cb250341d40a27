//! Minimal reverse-mode differentiable tensor operations for a small U-Net.
//!
//! Two entry styles share one set of kernels: direct functions here evaluate
//! an op eagerly on tensors, while [`Tape`] records the same ops for
//! gradient computation. Every gradient is provable against
//! [`finite_difference_check`].

mod gradcheck;
pub(crate) mod kernels;
mod simd;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use kernels::PROB_CLAMP;
pub use tape::{Tape, Var};
pub use tensor::{Element, Shape4, Tensor4};

use crate::rng::SeededRng;
use crate::Result;

/// 2-D cross-correlation with bias, `stride >= 1`, symmetric zero padding.
pub fn conv2d<E: Element>(
    x: &Tensor4<E>,
    kernel: &Tensor4<E>,
    bias: &[E],
    stride: usize,
    pad: usize,
) -> Result<Tensor4<E>> {
    kernels::conv_forward(x, kernel, bias, stride, pad)
}

/// Numerically stable softmax across the channel dimension.
pub fn channel_softmax<E: Element>(x: &Tensor4<E>) -> Result<Tensor4<E>> {
    kernels::softmax_forward(x)
}

pub fn relu<E: Element>(x: &Tensor4<E>) -> Tensor4<E> {
    kernels::relu_forward(x)
}

/// 2x2 max pooling with floor semantics on odd dims.
pub fn max_pool_2x2<E: Element>(x: &Tensor4<E>) -> Result<Tensor4<E>> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(crate::Error::shape(
            "max_pool_2x2",
            format!("spatial dims must be >= 2, got {}", s),
        ));
    }
    Ok(kernels::maxpool_forward(x).0)
}

pub fn nearest_upsample_2x2<E: Element>(x: &Tensor4<E>) -> Tensor4<E> {
    kernels::upsample_forward(x)
}

pub fn channel_concat<E: Element>(a: &Tensor4<E>, b: &Tensor4<E>) -> Result<Tensor4<E>> {
    kernels::concat_forward(a, b)
}

pub fn add<E: Element>(a: &Tensor4<E>, b: &Tensor4<E>) -> Result<Tensor4<E>> {
    kernels::add_forward(a, b)
}

pub fn scalar_scale<E: Element>(x: &Tensor4<E>, s: f64) -> Tensor4<E> {
    kernels::scale_forward(x, s)
}

/// Elementwise `t*a + (1-t)*b`.
pub fn lerp<E: Element>(a: &Tensor4<E>, b: &Tensor4<E>, t: f64) -> Result<Tensor4<E>> {
    kernels::lerp_forward(a, b, t)
}

/// Inverted dropout. Identity in eval mode or at rate 0; the mask is a pure
/// function of the rng state.
pub fn dropout_apply<E: Element>(
    x: &Tensor4<E>,
    rate: f64,
    rng: &mut SeededRng,
    training: bool,
) -> Result<Tensor4<E>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(crate::Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    Ok(kernels::dropout_forward(x, rate, rng).0)
}
