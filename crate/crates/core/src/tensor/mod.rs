//! Minimal reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! Tensors form an implicit tape: every operation allocates a new node that
//! remembers its parents and a backward rule. When no input requires a
//! gradient the node is recorded as a constant and its parents are dropped,
//! so inference runs without retaining intermediate activations.
//!
//! The element type is generic over [`Scalar`] (`f32` or `f64`); training
//! uses `f32`, numerical gradient checks use `f64`.

use ndarray::{ArrayD, NdFloat};
use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

mod conv;
pub(crate) mod elementwise;
mod norm;
pub(crate) mod resize;
pub(crate) mod seq;

pub use conv::{conv2d, conv_transpose2d_k2s2, depthwise_conv3x3, ConvSpec};
pub use elementwise::{add, concat_channels, mul, mul_channel_broadcast};
pub use norm::layer_norm_channels;
pub use resize::{bilinear_resize, bilinear_resize_2d};
pub use seq::{cross_merge4, cross_scan_dir, linear_seq, selective_scan_op};

/// Floating-point element type of the engine.
pub trait Scalar: NdFloat + num_traits::FromPrimitive + std::iter::Sum<Self> {
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Shorthand for converting an `f64` literal into the element type.
#[inline]
pub fn sc<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("literal representable in element type")
}

thread_local! {
    static NEXT_SEQ: Cell<u64> = const { Cell::new(0) };
}

fn next_seq() -> u64 {
    NEXT_SEQ.with(|c| {
        let v = c.get();
        c.set(v + 1);
        v
    })
}

/// Backward rule of one operation: maps the output gradient to one gradient
/// per parent (`None` where the parent does not require one).
pub trait GradFn<F: Scalar> {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        parents: &[Tensor<F>],
        output: &ArrayD<F>,
    ) -> Vec<Option<ArrayD<F>>>;
}

struct Node<F: Scalar> {
    seq: u64,
    value: ArrayD<F>,
    parents: Vec<Tensor<F>>,
    grad_fn: Option<Box<dyn GradFn<F>>>,
    requires_grad: bool,
}

/// A value in the computation graph. Cloning is cheap (shared node).
pub struct Tensor<F: Scalar>(Rc<Node<F>>);

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Scalar> Tensor<F> {
    /// A differentiable leaf (parameter or input under test).
    pub fn leaf(value: ArrayD<F>) -> Self {
        Tensor(Rc::new(Node {
            seq: next_seq(),
            value,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: true,
        }))
    }

    /// A constant: gradients never flow into it.
    pub fn constant(value: ArrayD<F>) -> Self {
        Tensor(Rc::new(Node {
            seq: next_seq(),
            value,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: false,
        }))
    }

    /// The value as a constant, cut off from the graph.
    pub fn detach(&self) -> Self {
        Tensor::constant(self.0.value.clone())
    }

    pub(crate) fn from_op(
        value: ArrayD<F>,
        parents: Vec<Tensor<F>>,
        grad_fn: Box<dyn GradFn<F>>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor(Rc::new(Node {
                seq: next_seq(),
                value,
                parents,
                grad_fn: Some(grad_fn),
                requires_grad: true,
            }))
        } else {
            // Inference path: drop the tape so intermediates free eagerly.
            Tensor::constant(value)
        }
    }

    pub fn value(&self) -> &ArrayD<F> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single element of a 0-d or 1-element tensor.
    pub fn scalar_value(&self) -> F {
        debug_assert_eq!(self.0.value.len(), 1, "scalar_value on non-scalar tensor");
        *self.0.value.iter().next().expect("non-empty tensor")
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as *const () as usize
    }

    /// Reverse-mode sweep seeded with ones at `self`.
    ///
    /// Nodes are replayed in descending creation order, which is a valid
    /// topological order because operations only consume already-built
    /// tensors. The traversal is deterministic for a fixed graph.
    pub fn backward(&self) -> Gradients<F> {
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.key()) {
                continue;
            }
            for p in &t.0.parents {
                stack.push(p.clone());
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.0.seq.cmp(&a.0.seq));

        let mut grads: HashMap<usize, ArrayD<F>> = HashMap::new();
        grads.insert(self.key(), ArrayD::ones(self.0.value.raw_dim()));

        for t in &order {
            let node = &t.0;
            let Some(grad_fn) = &node.grad_fn else {
                continue; // leaf: keep its accumulated gradient
            };
            let Some(g) = grads.remove(&t.key()) else {
                continue; // unreachable from the seed
            };
            let parent_grads = grad_fn.backward(&g, &node.parents, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if !p.requires_grad() {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.shape(), p.shape());
                    match grads.entry(p.key()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            *e.get_mut() += &pg;
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(pg);
                        }
                    }
                }
            }
        }
        Gradients { map: grads }
    }
}

/// Gradients produced by [`Tensor::backward`], keyed by node identity.
pub struct Gradients<F: Scalar> {
    map: HashMap<usize, ArrayD<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, t: &Tensor<F>) -> Option<&ArrayD<F>> {
        self.map.get(&t.key())
    }

    pub fn take(&mut self, t: &Tensor<F>) -> Option<ArrayD<F>> {
        self.map.remove(&t.key())
    }
}


impl<F: Scalar> Tensor<F> {
    /// Test helper: the same value as a fresh differentiable leaf.
    pub fn derive_leaf(&self) -> Tensor<F> {
        Tensor::leaf(self.0.value.clone())
    }
}
