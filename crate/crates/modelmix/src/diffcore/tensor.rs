//! Dense 4-D tensors in `(batch, channel, height, width)` layout with an
//! optional gradient slot.
//!
//! Stored element type is `f32` by default; `f64` is used by the
//! verification suites. Arithmetic kernels accumulate in double precision
//! regardless of the stored type.

use crate::{Error, Result};

/// Scalar element of a tensor.
pub trait Element: Copy + PartialOrd + Send + Sync + std::fmt::Debug + 'static {
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    #[inline(always)]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    #[inline(always)]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// `(n, c, h, w)` dimensions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4 { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline(always)]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array with an optional gradient of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<E: Element = f32> {
    shape: Shape4,
    data: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
}

impl<E: Element> Tensor4<E> {
    pub fn zeros(shape: Shape4) -> Tensor4<E> {
        Tensor4 {
            shape,
            data: vec![E::from_f64(0.0); shape.len()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: Shape4, v: E) -> Tensor4<E> {
        Tensor4 {
            shape,
            data: vec![v; shape.len()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<E>) -> Result<Tensor4<E>> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape} needs {} values, got {}", shape.len(), data.len()),
            ));
        }
        Ok(Tensor4 {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// 1x1x1x1 scalar tensor.
    pub fn scalar(v: E) -> Tensor4<E> {
        Tensor4::filled(Shape4::new(1, 1, 1, 1), v)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Tensor4<E> {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<E>) -> Result<()> {
        if grad.len() != self.shape.len() {
            return Err(Error::shape(
                "set_grad",
                format!("gradient length {} != tensor length {}", grad.len(), self.shape.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    #[inline(always)]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: E) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    /// Convert the stored element type.
    pub fn cast<F: Element>(&self) -> Tensor4<F> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor4<E>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Fill with uniform draws in `[-limit, limit]`.
    pub fn fill_uniform(&mut self, limit: f64, rng: &mut crate::rng::SeededRng) {
        for v in &mut self.data {
            *v = E::from_f64(rng.range_f64(-limit, limit));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let s = Shape4::new(1, 2, 2, 2);
        assert!(Tensor4::<f64>::from_vec(s, vec![0.0; 7]).is_err());
        assert!(Tensor4::<f64>::from_vec(s, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn grad_slot_shape_checked() {
        let mut t = Tensor4::<f32>::zeros(Shape4::new(1, 1, 2, 2));
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        assert!(t.set_grad(vec![0.0; 4]).is_ok());
        assert_eq!(t.grad().unwrap().len(), 4);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn index_is_row_major() {
        let s = Shape4::new(2, 3, 4, 5);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.index(1, 2, 3, 4), 119);
    }
}
