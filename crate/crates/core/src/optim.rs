//! Adam with global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::matrix::Matrix;
use crate::params::ParamSet;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    step: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(lr: f64, clip_norm: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to the trainable parameters named in `grads`.
    /// Frozen parameters are never touched even if a gradient is supplied.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Matrix>) {
        self.step += 1;
        let scale = self.clip_scale(grads);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(param) = params.get(name) else {
                continue;
            };
            if !param.trainable {
                continue;
            }
            let shape = param.value.shape();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            let value = params.value_mut(name);
            for i in 0..value.len() {
                let g = grad.as_slice()[i] * scale;
                let mi = self.beta1 * m.as_slice()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.as_slice()[i] + (1.0 - self.beta2) * g * g;
                m.as_mut_slice()[i] = mi;
                v.as_mut_slice()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                value.as_mut_slice()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    fn clip_scale(&self, grads: &BTreeMap<String, Matrix>) -> f64 {
        if self.clip_norm <= 0.0 {
            return 1.0;
        }
        let total: f64 = grads
            .values()
            .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum();
        let norm = total.sqrt();
        if norm > self.clip_norm {
            self.clip_norm / (norm + 1e-12)
        } else {
            1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2 with exact gradient 2(x - 3).
        let mut params = ParamSet::new();
        params.insert("x", Matrix::filled(1, 1, 0.0), true);
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..500 {
            let x = params.value("x").scalar();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Matrix::filled(1, 1, 2.0 * (x - 3.0)));
            opt.step(&mut params, &grads);
        }
        assert!((params.value("x").scalar() - 3.0).abs() < 1e-2);
    }

    #[test]
    fn frozen_params_are_never_updated() {
        let mut params = ParamSet::new();
        params.insert("f", Matrix::filled(1, 1, 5.0), false);
        let mut opt = Adam::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("f".to_string(), Matrix::filled(1, 1, 1.0));
        opt.step(&mut params, &grads);
        assert_eq!(params.value("f").scalar().to_bits(), 5.0_f64.to_bits());
    }

    #[test]
    fn clipping_bounds_the_applied_norm() {
        let grads: BTreeMap<String, Matrix> =
            [("a".to_string(), Matrix::filled(1, 4, 10.0))].into();
        let opt = Adam::new(0.1, 0.1);
        let scale = opt.clip_scale(&grads);
        let clipped_norm = 10.0 * scale * 2.0; // ||(10,10,10,10)|| = 20
        assert!((clipped_norm - 0.1).abs() < 1e-9);
    }
}
