//! SGD with momentum and L2 regularization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Velocity buffers plus the optimizer hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if learning_rate < 0.0 {
            return Err(Error::invalid("learning rate must be nonnegative".to_string()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)".to_string()));
        }
        if weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be nonnegative".to_string()));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// One update: `v <- momentum*v - lr*(g + wd*p); p <- p + v`.
    ///
    /// Each parameter must carry a populated gradient. Grads are consumed.
    /// Constraint projections (monotone sigma, alpha clamp) are applied by
    /// the caller afterwards.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters but got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if v.len() != p.len() {
                return Err(Error::shape(
                    "velocity buffer shape does not match its parameter".to_string(),
                ));
            }
            let grad = p
                .grad()
                .ok_or_else(|| Error::invalid("sgd_step: parameter has no gradient".to_string()))?
                .to_vec();
            let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = mu * *vi - lr * (gi + wd * *pi);
                *pi += *vi;
            }
            p.clear_grad();
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn sgd_step(params: &mut [Tensor], state: &mut OptimizerState) -> Result<()> {
    state.step(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f64], grad: &[f64]) -> Tensor {
        let mut t = Tensor::new(&[vals.len()], vals.to_vec()).unwrap().with_requires_grad();
        t.set_grad(grad.to_vec()).unwrap();
        t
    }

    #[test]
    fn plain_gradient_descent_when_momentum_and_wd_are_zero() {
        let mut params = vec![param(&[1.0, -2.0], &[0.5, 0.25])];
        let mut state = OptimizerState::new(0.1, 0.0, 0.0).unwrap();
        state.step(&mut params).unwrap();
        assert_eq!(params[0].data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn zero_gradient_zero_velocity_leaves_params_unchanged() {
        let mut params = vec![param(&[3.0], &[0.0])];
        let mut state = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
        state.step(&mut params).unwrap();
        assert_eq!(params[0].data(), &[3.0]);
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        // quadratic loss L(p) = a*p^2, grad = 2*a*p, with momentum and decay
        let (a, lr, mu, wd) = (0.7, 0.05, 0.9, 0.01);
        let mut p = 2.0;
        let mut v = 0.0;
        let mut expect = Vec::new();
        for _ in 0..2 {
            let g = 2.0 * a * p;
            v = mu * v - lr * (g + wd * p);
            p += v;
            expect.push(p);
        }

        let mut params = vec![param(&[2.0], &[2.0 * a * 2.0])];
        let mut state = OptimizerState::new(lr, mu, wd).unwrap();
        state.step(&mut params).unwrap();
        assert!((params[0].data()[0] - expect[0]).abs() < 1e-15);
        let g1 = 2.0 * a * params[0].data()[0];
        params[0].set_grad(vec![g1]).unwrap();
        state.step(&mut params).unwrap();
        assert!((params[0].data()[0] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = OptimizerState::new(0.1, 0.0, 0.0).unwrap();
        assert!(state.step(&mut params).is_err());
    }
}
