//! Adam optimizer with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Element> AdamHyper<T> {
    /// Projected-GAN style defaults: lr 2e-4, betas (0.0, 0.99), eps 1e-8.
    pub fn new(lr: f64) -> Self {
        AdamHyper {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.0),
            beta2: T::from_f64(0.99),
            eps: T::from_f64(1e-8),
        }
    }
}

/// Single-parameter Adam update:
/// m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2;
/// p <- p - lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected moments.
pub fn adam_update<T: Element>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    h: &AdamHyper<T>,
) -> Result<()> {
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(Error::contract(format!(
            "adam buffers disagree: p {} g {} m {} v {}",
            p.len(),
            g.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::contract("adam step counter must be >= 1"));
    }
    let one = T::one();
    let bc1 = one - h.beta1.powi(t as i32);
    let bc2 = one - h.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (one - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (one - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = p[i] - h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}

/// Optimizer over a set of named parameters. The step counter increments
/// once per `step` call, not per parameter.
#[derive(Debug)]
pub struct Adam<T: Element> {
    pub hyper: AdamHyper<T>,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
    t: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(hyper: AdamHyper<T>) -> Self {
        Adam {
            hyper,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Applies one update to `param` under this step's counter. Call
    /// [`Adam::begin_step`] once before updating the step's parameters.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &[T]) -> Result<()> {
        let n = param.numel();
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        adam_update(param.data_mut(), grad, m, v, self.t, &self.hyper)
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Moment buffers and counter for checkpointing.
    pub fn state(&self) -> (&BTreeMap<String, Vec<T>>, &BTreeMap<String, Vec<T>>, u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(&mut self, m: BTreeMap<String, Vec<T>>, v: BTreeMap<String, Vec<T>>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
