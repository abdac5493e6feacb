use super::DiffError;

/// Dense row-major f64 array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` covers `values` and that every value is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, DiffError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(DiffError::InvalidShape(shape));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(DiffError::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("valid shape and finite fill")
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// 1-D tensor over `values`.
    pub fn vector(values: Vec<f64>) -> Result<Self, DiffError> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), DiffError> {
        if delta.len() != self.values.len() {
            return Err(DiffError::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![delta.len()],
            });
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite {
                op: "accumulate_grad",
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }

    /// Replaces the values in place. Only valid outside a live tape; tapes copy leaf values on entry.
    pub fn assign(&mut self, values: &[f64]) -> Result<(), DiffError> {
        if values.len() != self.values.len() {
            return Err(DiffError::ShapeMismatch {
                op: "assign",
                left: self.shape.clone(),
                right: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "assign" });
        }
        self.values.copy_from_slice(values);
        Ok(())
    }
}
