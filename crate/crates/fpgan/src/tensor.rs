//! Dense row-major tensors with optional gradient storage.
//!
//! A `Tensor` is a plain value; tracked computation happens on a [`crate::tape::Tape`],
//! which identifies leaf tensors by their unique [`LeafId`].

use std::sync::atomic::{AtomicU64, Ordering};

use crate::element::{Dtype, Element};
use crate::error::{Error, Result};
use crate::rng::Rng;

static NEXT_LEAF_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor, stable across in-place mutation of its data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LeafId(u64);

fn fresh_leaf_id() -> LeafId {
    LeafId(NEXT_LEAF_ID.fetch_add(1, Ordering::Relaxed))
}

pub fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::shape("dims list is empty"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero extent in dims {dims:?}")));
    }
    Ok(())
}

pub fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

#[derive(Debug)]
pub struct Tensor<T: Element> {
    id: LeafId,
    dims: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Element> Clone for Tensor<T> {
    /// Clones get a fresh identity: a clone is a new leaf, not an alias.
    fn clone(&self) -> Self {
        Tensor {
            id: fresh_leaf_id(),
            dims: self.dims.clone(),
            data: self.data.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != numel(dims) {
            return Err(Error::shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor {
            id: fresh_leaf_id(),
            dims: dims.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Self::from_vec(dims, vec![T::zero(); numel(dims)])
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Self::from_vec(dims, vec![T::one(); numel(dims)])
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        check_dims(dims)?;
        Self::from_vec(dims, vec![value; numel(dims)])
    }

    /// Standard-normal fill drawn from `rng` in row-major order.
    pub fn randn(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        check_dims(dims)?;
        let data = (0..numel(dims)).map(|_| T::from_f64(rng.normal())).collect();
        Self::from_vec(dims, data)
    }

    /// Normal fill scaled by `std`.
    pub fn randn_scaled(dims: &[usize], std: f64, rng: &mut Rng) -> Result<Self> {
        check_dims(dims)?;
        let data = (0..numel(dims))
            .map(|_| T::from_f64(rng.normal() * std))
            .collect();
        Self::from_vec(dims, data)
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            id: fresh_leaf_id(),
            dims: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn id(&self) -> LeafId {
        self.id
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, value: bool) {
        self.requires_grad = value;
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the stored gradient, allocating zeros first if absent.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match tensor numel {}",
                delta.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }

    /// Reinterprets the same data with new dims of equal element count.
    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        if numel(dims) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {:?}",
                self.dims, dims
            )));
        }
        self.dims = dims.to_vec();
        self.grad = None;
        Ok(self)
    }
}

/// Central-difference gradient of a scalar-valued function, used as the
/// independent oracle for backward-pass checks. `f` must be deterministic.
pub fn finite_diff_grad<T: Element>(
    f: &mut dyn FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(Error::contract("finite_diff_grad requires eps > 0"));
    }
    let mut probe = x.clone();
    let mut grad = vec![T::zero(); x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (eps + eps);
    }
    Tensor::from_vec(x.dims(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_full() {
        let z: Tensor<f32> = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c: Tensor<f32> = Tensor::full(&[3], 2.5).unwrap();
        assert_eq!(c.data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn bad_dims_rejected() {
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a: Tensor<f64> = Tensor::randn(&[64], &mut Rng::from_seed(7)).unwrap();
        let b: Tensor<f64> = Tensor::randn(&[64], &mut Rng::from_seed(7)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn grad_accumulates() {
        let mut t: Tensor<f64> = Tensor::zeros(&[2]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_diff_squares() {
        let x: Tensor<f64> = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(
            &mut |t: &Tensor<f64>| Ok(t.data()[0] * t.data()[0]),
            &x,
            1e-3,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_sum_is_ones() {
        let x: Tensor<f64> = Tensor::randn(&[5], &mut Rng::from_seed(1)).unwrap();
        let g = finite_diff_grad(
            &mut |t: &Tensor<f64>| Ok(t.data().iter().sum()),
            &x,
            1e-4,
        )
        .unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }
}
