use super::{DiffError, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Adds per-parameter gradient buffers (as produced by [`BoundParams::collect`]).
    pub fn accumulate(&mut self, grads: &[Vec<f64>]) -> Result<(), DiffError> {
        if grads.len() != self.tensors.len() {
            return Err(DiffError::Invalid(format!(
                "expected {} gradient buffers, got {}",
                self.tensors.len(),
                grads.len()
            )));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes `var` for parameter `id`, e.g. to differentiate with respect to a probe leaf.
    pub fn with_var(mut self, id: ParamId, var: Var) -> Self {
        self.vars[id.0] = var;
        self
    }

    /// Gradient buffers in store order; parameters the loss ignores get zeros.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|v| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(*v).len()])
            })
            .collect()
    }
}
