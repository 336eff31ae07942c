use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AutodiffError;

/// Dense `f64` tensor in row-major order with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, AutodiffError> {
        if shape.contains(&0) {
            return Err(AutodiffError::InvalidShape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(AutodiffError::InvalidShape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zero tensor with positive dims")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).unwrap()
    }

    /// A `1 x n` row.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(vec![1, n], values).expect("row vector must be non-empty")
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, AutodiffError> {
        Self::new(vec![rows, cols], values)
    }

    /// Glorot/Xavier uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Self::uniform(rows, cols, bound, rng)
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(vec![rows, cols], values).expect("uniform tensor with positive dims")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), AutodiffError> {
        if delta.len() != self.values.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        grad.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
        Ok(())
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Matrix view `(rows, cols)`: rank-1 tensors are rows, scalars are `1 x 1`.
    pub fn matrix_dims(&self) -> Result<(usize, usize), AutodiffError> {
        match self.shape.as_slice() {
            [] => Ok((1, 1)),
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(AutodiffError::InvalidShape(format!(
                "tape operations support rank <= 2, got {other:?}"
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
