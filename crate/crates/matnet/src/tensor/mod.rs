pub mod io;
pub mod kernels;
pub mod ops;
pub mod tape;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shape::Shape;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor value. Ops produce fresh ids; clones share one.
/// The tape indexes graph nodes by id, and gradient maps are keyed by it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct TensorId(u64);

fn fresh_id() -> TensorId {
    TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
}

/// Dense numeric array of rank 1..=4, row-major, cheap to clone.
///
/// A tensor is plain data; participation in differentiation is decided by
/// the [`tape::Tape`] the ops are invoked with, which tracks tensors by id.
#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    id: TensorId,
    shape: Shape,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(data: Vec<S>, dims: &[usize]) -> Self {
        let shape = Shape::new(dims);
        assert_eq!(
            data.len(),
            shape.numel(),
            "data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
        }
    }

    pub(crate) fn from_parts(data: Arc<Vec<S>>, shape: Shape) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor { id: fresh_id(), shape, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let shape = Shape::new(dims);
        Tensor::from_vec(vec![S::zero(); shape.numel()], dims)
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        let shape = Shape::new(dims);
        Tensor::from_vec(vec![S::of(v); shape.numel()], dims)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![S::of(v)], &[1])
    }

    /// Standard-normal entries scaled by `std`, drawn from `rng`.
    pub fn randn(dims: &[usize], std: f64, rng: &mut Rng) -> Self {
        let shape = Shape::new(dims);
        let data = (0..shape.numel()).map(|_| S::of(rng.normal() * std)).collect();
        Tensor::from_vec(data, dims)
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    /// Same data under a fresh identity: severs any gradient path, because
    /// the tape has never seen the new id.
    pub fn detach(&self) -> Tensor<S> {
        Tensor {
            id: fresh_id(),
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
        }
    }

    /// Same data viewed under a different shape of equal element count.
    /// Like `detach`, the result is a fresh identity; use [`ops::reshape`]
    /// for a differentiable reshape.
    pub fn reshaped_view(&self, dims: &[usize]) -> Result<Tensor<S>> {
        let shape = Shape::new(dims);
        if shape.numel() != self.numel() {
            return Err(Error::shape("reshaped_view", format!("{} elements", self.numel()), shape.to_string()));
        }
        Ok(Tensor {
            id: fresh_id(),
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f64 {
        assert!(self.shape.is_scalar(), "item() on non-scalar {}", self.shape);
        self.data[0].as_f64()
    }

    /// Mean of all entries, in f64.
    pub fn mean_value(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.numel() as f64
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Convert element type (used by gradient checking to lift f32 setups to f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(self.data.iter().map(|v| T::of(v.as_f64())).collect(), self.dims())
    }

    /// Copy with one coordinate replaced (finite-difference probes).
    pub fn with_coord(&self, idx: usize, v: f64) -> Tensor<S> {
        let mut d = self.data.as_ref().clone();
        d[idx] = S::of(v);
        Tensor::from_vec(d, self.dims())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique_and_stable_across_clone() {
        let a: Tensor<f32> = Tensor::zeros(&[2, 2]);
        let b = a.clone();
        assert_eq!(a.id(), b.id());
        let c = a.detach();
        assert_ne!(a.id(), c.id());
        assert!(std::ptr::eq(a.data().as_ptr(), c.data().as_ptr()));
    }

    #[test]
    fn reshaped_view_checks_numel() {
        let a: Tensor<f32> = Tensor::zeros(&[2, 6]);
        assert!(a.reshaped_view(&[2, 3, 2]).is_ok());
        assert!(a.reshaped_view(&[2, 5]).is_err());
    }
}
