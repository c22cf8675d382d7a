use rand::Rng;

use super::{NumericsError, Scalar, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors with gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix drawn from `Normal(0, 0.02)`.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Tensor::randn(rows, cols, 0.02, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::full(rows, cols, T::one()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Adds `grads` into each tensor's accumulator, creating it when absent.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<(), NumericsError> {
        if grads.per_param.len() != self.tensors.len() {
            return Err(NumericsError::DataLength {
                expected: self.tensors.len(),
                got: grads.per_param.len(),
            });
        }
        for (t, g) in self.tensors.iter_mut().zip(&grads.per_param) {
            let acc = t.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (a, &x) in acc.iter_mut().zip(g) {
                *a = *a + x;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Replaces the tensor stored under `name`, keeping its shape contract.
    pub fn replace(&mut self, name: &str, tensor: Tensor<T>) -> Result<(), NumericsError> {
        let id = self
            .find(name)
            .ok_or_else(|| NumericsError::Checkpoint(format!("unknown parameter {name}")))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(NumericsError::shape("load", slot.shape(), tensor.shape()));
        }
        *slot = tensor;
        Ok(())
    }
}

/// Dense per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub per_param: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            per_param: store
                .tensors
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.per_param {
            for x in g.iter_mut() {
                *x = *x * s;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.per_param[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.per_param.iter().flatten().all(|x| x.is_finite())
    }
}
