//! Adaptive-moment optimiser.

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(&t.shape)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    /// One update; `grads[i]` belongs to parameter `i`. Missing gradients and
    /// frozen parameters leave both the parameter and its moments untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.t += 1;
        let (b1, b2) = (T::from_f64c(self.beta1), T::from_f64c(self.beta2));
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::from_f64c(self.lr / bc1);
        let inv_bc2 = T::from_f64c(1.0 / bc2);
        let eps = T::from_f64c(self.eps);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let id = ParamId(i);
            if store.is_frozen(id) {
                continue;
            }
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            let p = &mut store.get_mut(id).data;
            for k in 0..p.len() {
                let gk = grad.data[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                p[k] -= step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]));
        let mut adam = Adam::new(&store, 0.01);
        adam.step(&mut store, &[Some(Tensor::from_f64(&[3], &[0.5, -2.0, 0.0]))]);
        let w = &store.get(ParamId(0)).data;
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] - 2.01).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::from_f64(&[2], &[0.3, -0.7]));
        let before = store.get(ParamId(0)).clone();
        let mut adam = Adam::new(&store, 0.0);
        for _ in 0..3 {
            adam.step(&mut store, &[Some(Tensor::from_f64(&[2], &[1.0, -4.0]))]);
        }
        assert_eq!(store.get(ParamId(0)), &before);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[1], &[1.0]));
        store.set_frozen(id, true);
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &[Some(Tensor::from_f64(&[1], &[1.0]))]);
        assert_eq!(store.get(id).data[0], 1.0);
    }
}
