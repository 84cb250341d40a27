//! Eager reverse-mode differentiation over a Wengert list.
//!
//! Values are computed as operations are recorded; [`Tape::backward`] then
//! walks the list in reverse and accumulates gradients into every node that
//! (transitively) depends on a gradient-requiring leaf. Gradients are kept
//! per node so interior gradients (e.g. a mixed kernel) stay inspectable.

use super::kernels::{self, CosineAux};
use super::tensor::{Element, Tensor4};
use crate::rng::SeededRng;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Softmax {
        x: Var,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Lerp {
        a: Var,
        b: Var,
        t: f64,
    },
    PermuteBatch {
        x: Var,
        perm: Vec<usize>,
    },
    Dropout {
        x: Var,
        keep: Vec<u8>,
        rate: f64,
    },
    WeightedSum {
        x: Var,
        w: Vec<f64>,
    },
    MaskedNll {
        probs: Var,
        idx: Vec<u32>,
    },
    MaskedNllDice {
        probs: Var,
        idx: Vec<u32>,
    },
    Cosine {
        a: Var,
        b: Var,
        aux: CosineAux,
    },
}

struct Node<E: Element> {
    value: Tensor4<E>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one differentiable computation.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Tape<E> {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<E>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor4<E> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1x1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].to_f64()
    }

    /// Gradient written by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor4<E>> {
        let g = self.grad(v)?.to_vec();
        Some(Tensor4::from_vec(self.nodes[v.0].value.shape(), g).expect("grad shape"))
    }

    // -- node constructors ---------------------------------------------------

    /// Insert a tensor; it participates in gradients iff `requires_grad` is
    /// set on it.
    pub fn leaf(&mut self, t: Tensor4<E>) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor4<E>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Cut the gradient flow: same value, no parents.
    pub fn detach(&mut self, x: Var) -> Var {
        let mut v = self.nodes[x.0].value.clone();
        v.clear_grad();
        self.push(v, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let bs = self.value(bias).shape();
        let ks = self.value(kernel).shape();
        if bs.n != 1 || bs.h != 1 || bs.w != 1 || bs.c != ks.n {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {} must be (1, {}, 1, 1)", bs, ks.n),
            ));
        }
        let out = kernels::conv_forward(
            self.value(x),
            self.value(kernel),
            self.value(bias).data(),
            stride,
            pad,
        )?;
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax { x }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn max_pool_2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.h < 2 || s.w < 2 {
            return Err(Error::shape(
                "max_pool_2x2",
                format!("spatial dims must be >= 2, got {}", s),
            ));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x));
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    pub fn nearest_upsample_2x2(&mut self, x: Var) -> Var {
        let out = kernels::upsample_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Upsample { x }, needs)
    }

    pub fn channel_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_forward(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add_forward(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn scalar_scale(&mut self, x: Var, s: f64) -> Var {
        let out = kernels::scale_forward(self.value(x), s);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, s }, needs)
    }

    /// `t*a + (1-t)*b`.
    pub fn lerp(&mut self, a: Var, b: Var, t: f64) -> Result<Var> {
        let out = kernels::lerp_forward(self.value(a), self.value(b), t)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Lerp { a, b, t }, needs))
    }

    pub fn permute_batch(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = kernels::permute_batch_forward(self.value(x), perm)?;
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::PermuteBatch {
                x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Identity in eval mode or at rate 0; otherwise zeroes elements with
    /// probability `rate` and scales survivors by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut SeededRng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let (out, keep) = kernels::dropout_forward(self.value(x), rate, rng);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, keep, rate }, needs))
    }

    /// Scalar dot product with fixed weights; the usual grad-check cotangent.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let xs = self.value(x);
        if w.len() != xs.shape().len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("weights {} != elements {}", w.len(), xs.shape().len()),
            ));
        }
        let v = kernels::weighted_sum_forward(xs, w);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor4::scalar(E::from_f64(v)),
            Op::WeightedSum { x, w: w.to_vec() },
            needs,
        ))
    }

    /// Mean of `-ln p` over flat indices (annotated-pixel cross-entropy).
    pub fn masked_nll(&mut self, probs: Var, idx: Vec<u32>) -> Result<Var> {
        self.check_indices(probs, &idx)?;
        let v = kernels::masked_nll_forward(self.value(probs), &idx);
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor4::scalar(E::from_f64(v)),
            Op::MaskedNll { probs, idx },
            needs,
        ))
    }

    /// Mean of `-(ln p + 2p/(1+p))` over flat indices (CE + Dice term).
    pub fn masked_nll_dice(&mut self, probs: Var, idx: Vec<u32>) -> Result<Var> {
        self.check_indices(probs, &idx)?;
        let v = kernels::masked_nll_dice_forward(self.value(probs), &idx);
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor4::scalar(E::from_f64(v)),
            Op::MaskedNllDice { probs, idx },
            needs,
        ))
    }

    fn check_indices(&self, probs: Var, idx: &[u32]) -> Result<()> {
        let len = self.value(probs).shape().len();
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= len) {
            return Err(Error::InvalidArgument(format!(
                "annotated index {bad} out of range for tensor of {len} elements"
            )));
        }
        Ok(())
    }

    /// Batch-mean negative cosine similarity between flattened samples.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, aux) = kernels::cosine_forward(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor4::scalar(E::from_f64(v)),
            Op::Cosine { a, b, aux },
            needs,
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Accumulate gradients of scalar `root` into every dependent node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.shape().len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got {}",
                rv.shape()
            )));
        }
        let rval = rv.data()[0].to_f64();
        if !rval.is_finite() {
            return Err(Error::NonFinite {
                context: "backward root".into(),
                detail: format!("loss value {rval}"),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![E::from_f64(1.0)]);

        for i in (0..=root.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (head, tail) = self.grads.split_at_mut(i);
            let g: &[E] = tail[0].as_ref().expect("checked above");
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    x,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let (gx, gk, gb) = kernels::conv_backward(
                        &nodes[x.0].value,
                        &nodes[kernel.0].value,
                        *stride,
                        *pad,
                        g,
                    )?;
                    if nodes[x.0].needs_grad {
                        accumulate(&mut head[x.0], &gx);
                    }
                    if nodes[kernel.0].needs_grad {
                        accumulate(&mut head[kernel.0], &gk);
                    }
                    if nodes[bias.0].needs_grad {
                        accumulate(&mut head[bias.0], &gb);
                    }
                }
                Op::Softmax { x } => {
                    let gx = kernels::softmax_backward(&node.value, g);
                    accumulate(&mut head[x.0], &gx);
                }
                Op::Relu { x } => {
                    let gx = kernels::relu_backward(&nodes[x.0].value, g);
                    accumulate(&mut head[x.0], &gx);
                }
                Op::MaxPool { x, argmax } => {
                    let gx = kernels::maxpool_backward(nodes[x.0].value.shape(), argmax, g);
                    accumulate(&mut head[x.0], &gx);
                }
                Op::Upsample { x } => {
                    let gx = kernels::upsample_backward(nodes[x.0].value.shape(), g);
                    accumulate(&mut head[x.0], &gx);
                }
                Op::Concat { a, b } => {
                    let (ga, gb) =
                        kernels::concat_backward(nodes[a.0].value.shape(), nodes[b.0].value.shape(), g);
                    if nodes[a.0].needs_grad {
                        accumulate(&mut head[a.0], &ga);
                    }
                    if nodes[b.0].needs_grad {
                        accumulate(&mut head[b.0], &gb);
                    }
                }
                Op::Add { a, b } => {
                    let gf: Vec<f64> = g.iter().map(|v| v.to_f64()).collect();
                    if nodes[a.0].needs_grad {
                        accumulate(&mut head[a.0], &gf);
                    }
                    if nodes[b.0].needs_grad {
                        accumulate(&mut head[b.0], &gf);
                    }
                }
                Op::Scale { x, s } => {
                    let gx: Vec<f64> = g.iter().map(|v| v.to_f64() * s).collect();
                    accumulate(&mut head[x.0], &gx);
                }
                Op::Lerp { a, b, t } => {
                    if nodes[a.0].needs_grad {
                        let ga: Vec<f64> = g.iter().map(|v| v.to_f64() * t).collect();
                        accumulate(&mut head[a.0], &ga);
                    }
                    if nodes[b.0].needs_grad {
                        let gb: Vec<f64> = g.iter().map(|v| v.to_f64() * (1.0 - t)).collect();
                        accumulate(&mut head[b.0], &gb);
                    }
                }
                Op::PermuteBatch { x, perm } => {
                    let gx = kernels::permute_batch_backward(nodes[x.0].value.shape(), perm, g);
                    accumulate(&mut head[x.0], &gx);
                }
                Op::Dropout { x, keep, rate } => {
                    let gx = kernels::dropout_backward(keep, *rate, g);
                    accumulate(&mut head[x.0], &gx);
                }
                Op::WeightedSum { x, w } => {
                    let gx = kernels::weighted_sum_backward(w, g[0].to_f64());
                    accumulate(&mut head[x.0], &gx);
                }
                Op::MaskedNll { probs, idx } => {
                    let mut gx = vec![0.0f64; nodes[probs.0].value.shape().len()];
                    kernels::masked_nll_backward(&nodes[probs.0].value, idx, g[0].to_f64(), &mut gx);
                    accumulate(&mut head[probs.0], &gx);
                }
                Op::MaskedNllDice { probs, idx } => {
                    let mut gx = vec![0.0f64; nodes[probs.0].value.shape().len()];
                    kernels::masked_nll_dice_backward(
                        &nodes[probs.0].value,
                        idx,
                        g[0].to_f64(),
                        &mut gx,
                    );
                    accumulate(&mut head[probs.0], &gx);
                }
                Op::Cosine { a, b, aux } => {
                    let len = nodes[a.0].value.shape().len();
                    let mut ga = vec![0.0f64; len];
                    let mut gb = vec![0.0f64; len];
                    kernels::cosine_backward(
                        &nodes[a.0].value,
                        &nodes[b.0].value,
                        aux,
                        g[0].to_f64(),
                        &mut ga,
                        &mut gb,
                    );
                    if nodes[a.0].needs_grad {
                        accumulate(&mut head[a.0], &ga);
                    }
                    if nodes[b.0].needs_grad {
                        accumulate(&mut head[b.0], &gb);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Add an f64 contribution into a (lazily allocated) grad buffer.
fn accumulate<E: Element>(slot: &mut Option<Vec<E>>, contrib: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, &c) in buf.iter_mut().zip(contrib) {
                *b = E::from_f64(b.to_f64() + c);
            }
        }
        None => {
            *slot = Some(contrib.iter().map(|&c| E::from_f64(c)).collect());
        }
    }
}

