//! Dense `f64` tensors of rank 1 to 3 with an optional gradient accumulator.
//!
//! A [`Tensor`] is a plain value: row-major storage plus shape metadata.
//! Differentiable computation does not happen on tensors directly; it is
//! recorded on a [`crate::tape::Tape`], which deposits gradients back into
//! the leaf tensors it was built from. Gradient accumulation is additive:
//! running two backward passes without [`Tensor::zero_grad`] doubles the
//! stored gradient.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 3;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense n-dimensional value, the substrate of all computation in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::contract(
                "Tensor::new",
                format!("rank between 1 and {MAX_RANK}"),
                format!("rank {}", shape.len()),
            ));
        }
        if numel(&shape) != data.len() {
            return Err(Error::contract(
                "Tensor::new",
                format!("{} data values for shape {:?}", numel(&shape), shape),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = numel(&shape);
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar shape is always valid")
    }

    /// Marks the tensor as a differentiation leaf; backward passes will
    /// accumulate into its gradient.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Resets the gradient so the next backward pass starts from zero.
    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Shared handle to a learnable tensor.
///
/// Layers and the parameter registry hold clones of the same handle, so an
/// optimizer step through the registry is visible to every layer that uses
/// the parameter. A handle is confined to one thread, matching the
/// single-threaded training step.
#[derive(Debug, Clone)]
pub struct Parameter(Rc<RefCell<Tensor>>);

impl Parameter {
    pub fn new(tensor: Tensor) -> Self {
        Parameter(Rc::new(RefCell::new(tensor.with_grad())))
    }

    /// A leaf that never receives gradients (fixed tables, test fixtures).
    pub fn frozen(mut tensor: Tensor) -> Self {
        tensor.requires_grad = false;
        Parameter(Rc::new(RefCell::new(tensor)))
    }

    pub fn borrow(&self) -> Ref<'_, Tensor> {
        self.0.borrow()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().numel()
    }

    pub fn data_vec(&self) -> Vec<f64> {
        self.0.borrow().data().to_vec()
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad().map(<[f64]>::to_vec)
    }

    /// Replaces the stored values. The shape is fixed at construction.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut t = self.0.borrow_mut();
        if data.len() != t.numel() {
            return Err(Error::contract(
                "Parameter::set_data",
                format!("{} values", t.numel()),
                format!("{} values", data.len()),
            ));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn accumulate_grad(&self, g: &[f64]) {
        self.0.borrow_mut().accumulate_grad(g);
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().zero_grad();
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad()
    }

    /// Stable identity of the underlying storage, used by the tape to
    /// recognise a parameter that participates in a step more than once.
    pub(crate) fn storage_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(self.0.borrow_mut().data_mut());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_rank_zero_and_rank_four() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn rejects_shape_data_disagreement() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("6"), "error should name the expected count: {msg}");
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let mut t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        t.accumulate_grad(&[0.5, 1.0]);
        t.accumulate_grad(&[0.5, 1.0]);
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn parameter_handles_share_storage() {
        let p = Parameter::new(Tensor::zeros(vec![2]).unwrap());
        let q = p.clone();
        p.set_data(vec![3.0, 4.0]).unwrap();
        assert_eq!(q.data_vec(), vec![3.0, 4.0]);
        assert_eq!(p.storage_id(), q.storage_id());
    }
}
