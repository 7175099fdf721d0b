//! Adam restricted to trainable parameters.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters and parameters without a
    /// gradient are left untouched. Non-finite gradients abort the step
    /// before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let bad: Vec<String> = grads
            .params()
            .filter(|(_, g)| g.iter().any(|v| !v.is_finite()))
            .map(|(id, _)| store.get(id).name.clone())
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFinite(bad));
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (id, g) in grads.params() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let i = id.index();
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GradMode, Graph};
    use crate::tensor::Tensor;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![3.0, -2.0])).unwrap();
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        for _ in 0..300 {
            let grads = {
                let mut g = Graph::new(&store, GradMode::Trainable);
                let x = g.param(w);
                let sq = g.mul(x, x).unwrap();
                let l = g.sum(sq).unwrap();
                g.backward(l).unwrap()
            };
            adam.step(&mut store, &grads).unwrap();
        }
        assert!(store.tensor(w).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_lr_and_frozen_are_bitwise_unchanged() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.1, -0.7])).unwrap();
        let b = store.add("b", Tensor::scalar(1.5)).unwrap();
        store.get_mut(b).trainable = false;
        let before = store.clone();
        let grads = {
            let mut g = Graph::new(&store, GradMode::All);
            let (x, y) = (g.param(a), g.param(b));
            let s1 = g.sum(x).unwrap();
            let s = g.mul(s1, y).unwrap();
            g.backward(s).unwrap()
        };
        let mut adam = Adam::new(0.0, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &grads).unwrap();
        assert!(store.tensor(a).bit_eq(before.tensor(a)));
        let mut adam = Adam::new(0.5, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &grads).unwrap();
        assert!(store.tensor(b).bit_eq(before.tensor(b)));
        assert!(!store.tensor(a).bit_eq(before.tensor(a)));
    }
}
