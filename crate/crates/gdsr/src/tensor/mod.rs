//! Dense rank-4 tensors (batch, channel, height, width) with reverse-mode
//! differentiation recorded at operation granularity.

mod autograd;
mod conv;
mod elem;
mod gradcheck;
mod linear;
mod ops;
mod pool;
mod resize;
mod shuffle;

pub use autograd::no_grad;
pub use conv::{conv2d, Conv2d};
pub use elem::Elem;
pub use gradcheck::{check_param_gradients, grad_check, numeric_gradient};
pub use linear::{linear, matmul, softmax_w, Linear};
pub use ops::{
    abs, activation, add, affine, concat_channels, mul, mul_channels, scale, split_channels, sub,
    sum_all, Activation,
};
pub use pool::{avg_pool2d, avg_pool_smooth, blur121, downsample2, global_avg_pool};
pub use resize::{resize, resize_bicubic, ResizeMode};
pub use shuffle::{
    broadcast_batch, pixel_shuffle, pixel_unshuffle, reshape, transpose_hw, window_merge,
    window_partition,
};

use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use autograd::{backprop, grad_enabled, Node};

/// Shape of a rank-4 tensor: (batch, channels, rows, cols).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor. Cloning is cheap (the payload is shared); data is
/// immutable once produced except through [`Tensor::data_mut`], which is
/// reserved for parameter updates on leaves.
pub struct Tensor<E: Elem> {
    shape: Shape,
    data: Arc<Vec<E>>,
    node: Option<Rc<Node<E>>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<E: Elem> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{} traced={} data={:?}…",
            self.shape,
            self.node.is_some(),
            &self.data[..self.data.len().min(8)]
        )
    }
}

impl<E: Elem> Tensor<E> {
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {} (= {} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![E::ZERO; shape.numel()]),
            node: None,
        }
    }

    pub fn full(shape: Shape, value: E) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
            node: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    /// Uniform values in [lo, hi), drawn deterministically from `rng`.
    pub fn rand(shape: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| E::from_f64(rng.range(lo, hi)))
            .collect();
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.shape.index(n, c, y, x)]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Mutable access to the payload. Intended for leaves (parameter updates,
    /// finite-difference perturbation); recorded history, if any, is kept.
    pub fn data_mut(&mut self) -> &mut [E] {
        let v: &mut Vec<E> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub fn fill(&mut self, value: E) {
        for v in self.data_mut() {
            *v = value;
        }
    }

    /// Marks this tensor as a differentiable leaf.
    pub fn traced(mut self) -> Self {
        if self.node.is_none() {
            self.node = Some(Node::leaf(self.shape.numel()));
        }
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same data, no recorded history.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.as_ref().and_then(|n| n.grad.borrow().clone())
    }

    pub fn clear_grad(&self) {
        if let Some(node) = &self.node {
            *node.grad.borrow_mut() = None;
        }
    }

    /// Scales the accumulated gradient in place (gradient clipping).
    pub fn scale_grad(&self, factor: E) {
        if let Some(node) = &self.node {
            if let Some(g) = node.grad.borrow_mut().as_mut() {
                for v in g {
                    *v *= factor;
                }
            }
        }
    }

    /// Reverse-mode sweep from a scalar.
    pub fn backward(&self) -> Result<()> {
        let node = self.node.as_ref().ok_or_else(|| {
            Error::InvalidParameter("backward on an untraced tensor".to_string())
        })?;
        if self.numel() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward expects a scalar, got {}",
                self.shape
            )));
        }
        backprop(node);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts elements through f64, e.g. f32 -> f64 for gradient checks.
    pub fn cast<T: Elem>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.to_f64())).collect()),
            node: None,
        }
    }

    // ---- internal plumbing used by the op implementations ----

    pub(crate) fn node(&self) -> Option<Rc<Node<E>>> {
        self.node.clone()
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    /// Builds an op output: attaches a graph node when recording is on and at
    /// least one input is traced. `parent_nodes` holds the nodes of exactly
    /// the traced inputs, and `backward` yields one contribution per entry,
    /// in the same order.
    pub(crate) fn op_output(
        shape: Shape,
        data: Vec<E>,
        parent_nodes: Vec<Rc<Node<E>>>,
        backward: impl Fn(&[E]) -> Vec<Vec<E>> + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        let node = if grad_enabled() && !parent_nodes.is_empty() {
            Some(Node::op(shape.numel(), parent_nodes, Box::new(backward)))
        } else {
            None
        };
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }
}

/// Collects the autograd nodes of traced inputs together with a per-input
/// flag. Backward closures must push one contribution per traced input, in
/// input order, which matches the returned parent order.
pub(crate) fn trace_inputs<E: Elem>(inputs: &[&Tensor<E>]) -> (Vec<Rc<Node<E>>>, Vec<bool>) {
    let mut nodes = Vec::new();
    let mut traced = Vec::with_capacity(inputs.len());
    for t in inputs {
        match t.node() {
            Some(n) if grad_enabled() => {
                traced.push(true);
                nodes.push(n);
            }
            _ => traced.push(false),
        }
    }
    (nodes, traced)
}
