use serde::{Deserialize, Serialize};

use super::{Param, Parameterized};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 coefficient added as `2 * weight_decay * w` to the gradient of
    /// arrays flagged with [`Param::decay`].
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-7, weight_decay: 1e-4 }
    }
}

/// Adam with per-array first and second moments, kept in visiting order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new<M: Parameterized<T> + ?Sized>(config: AdamConfig, model: &M) -> Self {
        let mut first = Vec::new();
        model.visit(&mut |p| first.push(vec![T::zero(); p.len()]));
        let second = first.clone();
        Self { config, first, second, steps: 0 }
    }

    /// Apply one update with learning rate `lr`, then clear the gradients.
    pub fn step<M: Parameterized<T> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (ob1, ob2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let step_size = T::c(lr * bc2.sqrt() / bc1);
        let eps = T::c(c.epsilon * bc2.sqrt());
        let wd = T::c(2.0 * c.weight_decay);
        let mut i = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut(&mut |p: &mut Param<T>| {
            let m = &mut first[i];
            let v = &mut second[i];
            for j in 0..p.value.len() {
                let mut g = p.grad[j];
                if p.decay {
                    g = g + wd * p.value[j];
                }
                m[j] = b1 * m[j] + ob1 * g;
                v[j] = b2 * v[j] + ob2 * g * g;
                p.value[j] = p.value[j] - step_size * m[j] / (v[j].sqrt() + eps);
                p.grad[j] = T::zero();
            }
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Param<f64>);

    impl Parameterized<f64> for One {
        fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = One(Param::zeros("w", &[2]));
        m.0.value = vec![1.0, -1.0];
        m.0.grad = vec![3.0, -0.5];
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, &m);
        opt.step(&mut m, 1e-3);
        assert!((m.0.value[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((m.0.value[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(m.0.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut m = One(Param::zeros("w", &[1]));
        m.0.value = vec![5.0];
        let mut opt = Adam::new(AdamConfig::default(), &m);
        for _ in 0..3000 {
            m.0.grad[0] = 2.0 * (m.0.value[0] - 2.0);
            opt.step(&mut m, 1e-2);
        }
        assert!((m.0.value[0] - 2.0).abs() < 1e-2);
    }
}
