//! Dense row-major tensors with an optional gradient slot.
//!
//! Every numeric value in the engine (parameters, activations, minibatches,
//! logits) is a [`Tensor`] of 64-bit reals. A scalar is a rank-0 tensor with
//! one element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "shape {:?} has a zero dimension",
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarTerminal {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient slot, allocating zeros on first use.
    /// Accumulation is additive until [`Tensor::zero_grad`] is called.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let grad = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Gradient slot contents, zeros if no gradient has been accumulated.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        match &self.grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.data.len()],
        }
    }
}

/// Central-difference gradient oracle:
/// `(loss(w + eps e_i) - loss(w - eps e_i)) / (2 eps)` per coordinate.
///
/// Exact for quadratics up to rounding. Invalid at nondifferentiable points
/// (e.g. `|w|` at 0, where it returns the symmetric average); callers must
/// keep evaluation points away from kinks.
pub fn finite_diff_grad<F>(loss_fn: F, params: &Tensor, eps: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = params.clone();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = loss_fn(&probe);
        probe.data[i] = orig - eps;
        let minus = loss_fn(&probe);
        probe.data[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Tensor {
        shape: params.shape.clone(),
        data: grad,
        grad: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 1.0]);
        t.accumulate_grad(&[0.5, 1.0]);
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn finite_diff_on_square_is_exact_to_rounding() {
        let w = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &w, 1e-4);
        assert!((g.data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn finite_diff_at_abs_kink_returns_zero() {
        let w = Tensor::new(vec![1], vec![0.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0].abs(), &w, 1e-4);
        assert_eq!(g.data()[0], 0.0);
    }

    #[test]
    fn finite_diff_of_sum_is_all_ones() {
        let w = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &w, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
