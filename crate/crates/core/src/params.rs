//! Named parameter storage shared by the network modules, plus initializers.
//!
//! Modules hold [`ParamId`] handles; a [`Bindings`] snapshot turns the stored
//! arrays into graph leaves for one forward pass. Binding with
//! `trainable = false` produces constants, so inference runs tape-free.

use crate::tensor::{sc, Scalar, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Leaf tensors for one forward pass.
    pub fn bind(&self, trainable: bool) -> Bindings<F> {
        let leaves = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    Tensor::leaf(v.clone())
                } else {
                    Tensor::constant(v.clone())
                }
            })
            .collect();
        Bindings { leaves }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

pub struct Bindings<F: Scalar> {
    leaves: Vec<Tensor<F>>,
}

impl<F: Scalar> Bindings<F> {
    pub fn get(&self, id: ParamId) -> Tensor<F> {
        self.leaves[id.0].clone()
    }

    /// Gradient arrays in parameter order (zeros where a parameter was
    /// unreachable from the loss).
    pub fn collect_grads(
        &self,
        grads: &mut crate::tensor::Gradients<F>,
        store: &ParamStore<F>,
    ) -> Vec<ArrayD<F>> {
        self.leaves
            .iter()
            .enumerate()
            .map(|(i, leaf)| {
                grads
                    .take(leaf)
                    .unwrap_or_else(|| ArrayD::zeros(store.values[i].raw_dim()))
            })
            .collect()
    }
}

/// He-style normal initialization for conv / linear weights.
pub fn kaiming<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut a = ArrayD::<F>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = sc::<F>(z * std);
    }
    a
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::ones(IxDyn(shape))
}
