//! Gradient application. One `OptimState` owns the learning rate, the step
//! counter and (for the adaptive method) per-parameter moment accumulators.
//!
//! Every gradient is validated as finite before any parameter is touched, so
//! a numerical abort always leaves the parameters at their last good values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Param;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Plain gradient descent: p -= lr * g. Used by analytic tests.
    Descent,
    /// First/second-moment adaptive descent (decay 0.9 / 0.999, eps 1e-8).
    AdaptiveMoments,
}

#[derive(Debug)]
pub struct OptimState {
    method: Method,
    learning_rate: f64,
    step_count: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimState {
    pub fn new(method: Method, learning_rate: f64) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate <= 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(OptimState { method, learning_rate, step_count: 0, moments: Vec::new() })
    }

    pub fn descent(learning_rate: f64) -> Result<Self> {
        Self::new(Method::Descent, learning_rate)
    }

    pub fn adaptive(learning_rate: f64) -> Result<Self> {
        Self::new(Method::AdaptiveMoments, learning_rate)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. `grads` is parallel to `params`; a non-finite
    /// gradient aborts before anything is written, naming the parameter.
    pub fn step(&mut self, params: &mut [Param], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "step",
                format!("{} gradients", params.len()),
                format!("{}", grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.len() != g.len() {
                return Err(Error::shape(
                    format!("step on {}", p.name),
                    format!("{} values", p.value.len()),
                    format!("{}", g.len()),
                ));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!(
                    "gradient of parameter {} contains {bad}",
                    p.name
                )));
            }
        }
        if self.moments.is_empty() && self.method == Method::AdaptiveMoments {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
                .collect();
        }
        if self.method == Method::AdaptiveMoments && self.moments.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer state tracks {} parameters, step got {}",
                self.moments.len(),
                params.len()
            )));
        }
        let t = (self.step_count + 1) as i32;
        match self.method {
            Method::Descent => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (v, gv) in p.value.data_mut().iter_mut().zip(*g) {
                        *v -= self.learning_rate * gv;
                    }
                }
            }
            Method::AdaptiveMoments => {
                let bc1 = 1.0 - BETA1.powi(t);
                let bc2 = 1.0 - BETA2.powi(t);
                for ((p, g), (m, s)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
                    let vals = p.value.data_mut();
                    for i in 0..vals.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        s[i] = BETA2 * s[i] + (1.0 - BETA2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let s_hat = s[i] / bc2;
                        vals[i] -= self.learning_rate * m_hat / (s_hat.sqrt() + EPSILON);
                    }
                }
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn plain_descent_scalar_step() {
        let mut params = vec![Param::new("p", Tensor::scalar(1.0))];
        let mut state = OptimState::descent(0.1).unwrap();
        state.step(&mut params, &[&[1.0]]).unwrap();
        assert!((params[0].value.item() - 0.9).abs() <= 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for mut state in [OptimState::descent(0.1).unwrap(), OptimState::adaptive(0.1).unwrap()] {
            let mut params = vec![Param::new("p", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap())];
            state.step(&mut params, &[&[0.0, 0.0]]).unwrap();
            assert_eq!(params[0].value.data(), &[1.5, -0.5]);
            assert_eq!(state.step_count(), 1);
        }
    }

    #[test]
    fn quadratic_bowl_descends_for_ten_steps() {
        for mut state in [OptimState::descent(0.1).unwrap(), OptimState::adaptive(0.1).unwrap()] {
            let mut params = vec![Param::new("p", Tensor::scalar(1.0))];
            let mut last = f64::INFINITY;
            for _ in 0..10 {
                let mut g = Graph::new();
                let p = g.param(params[0].value.clone());
                let sq = g.mul(p, p).unwrap();
                let loss = g.sum(sq);
                let lv = g.value(loss).item();
                assert!(lv < last, "loss did not decrease: {lv} vs {last}");
                last = lv;
                let grads = g.backward(loss).unwrap();
                let gp = grads.get(p).unwrap();
                state.step(&mut params, &[gp]).unwrap();
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_touching_params() {
        let mut params = vec![
            Param::new("weights.0", Tensor::scalar(1.0)),
            Param::new("weights.1", Tensor::scalar(2.0)),
        ];
        let mut state = OptimState::adaptive(0.1).unwrap();
        let err = state
            .step(&mut params, &[&[0.5], &[f64::NAN]])
            .unwrap_err();
        assert!(err.to_string().contains("weights.1"), "{err}");
        assert_eq!(err.exit_code(), 3);
        assert_eq!(params[0].value.item(), 1.0);
        assert_eq!(params[1].value.item(), 2.0);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(OptimState::descent(0.0).is_err());
        assert!(OptimState::descent(-1.0).is_err());
        assert!(OptimState::adaptive(f64::NAN).is_err());
    }
}
