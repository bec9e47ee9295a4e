//! Adam optimizer with bias correction.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::layers::ParamSet;

/// Per-parameter first/second moment accumulators plus hyperparameters.
/// Defaults: lr 0.001, beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<usize, Vec<f64>>,
    v: HashMap<usize, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable parameter. Requires a populated
    /// gradient on each; gradients are consumed (zeroed) by the step.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for p in params.params() {
            if p.trainable && p.grad.is_none() {
                return Err(Error::state(format!(
                    "adam step with missing gradient for `{}`",
                    p.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (idx, p) in params.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let m = self
                .m
                .entry(idx)
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(idx)
                .or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = ParamSet::new();
        let id = params.add("p", vec![3], vec![1.0, -2.0, 0.5], true);
        params.accumulate_grad(id, &[0.0, 0.0, 0.0]);
        let mut adam = Adam::new(0.001);
        adam.step(&mut params).unwrap();
        assert_eq!(params.value(id), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // f(x) = x^2 at x=1: grad 2. Bias-corrected first step is
        // lr * g / (|g| + eps) ~= lr.
        let mut params = ParamSet::new();
        let id = params.add("x", vec![1], vec![1.0], true);
        params.accumulate_grad(id, &[2.0]);
        let mut adam = Adam::new(0.001);
        adam.step(&mut params).unwrap();
        let x = params.value(id)[0];
        assert!((x - 0.999).abs() < 1e-6, "x = {x}");
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut params = ParamSet::new();
        params.add("p", vec![1], vec![0.0], true);
        let mut adam = Adam::new(0.001);
        assert!(matches!(
            adam.step(&mut params),
            Err(crate::error::Error::State(_))
        ));
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // Minimize sum((x - c)^2) for 200 steps; loss must drop 10x.
        let target = [3.0, -1.0, 0.25, 7.5];
        let mut params = ParamSet::new();
        let id = params.add("x", vec![4], vec![0.0; 4], true);
        let mut adam = Adam::new(0.05);
        let loss_of = |params: &ParamSet| -> f64 {
            params
                .value(id)
                .iter()
                .zip(&target)
                .map(|(x, c)| (x - c) * (x - c))
                .sum()
        };
        let initial = loss_of(&params);
        for _ in 0..200 {
            let grad: Vec<f64> = params
                .value(id)
                .iter()
                .zip(&target)
                .map(|(x, c)| 2.0 * (x - c))
                .collect();
            params.accumulate_grad(id, &grad);
            adam.step(&mut params).unwrap();
        }
        let fin = loss_of(&params);
        assert!(
            fin < initial / 10.0,
            "loss went from {initial} to only {fin}"
        );
    }
}
