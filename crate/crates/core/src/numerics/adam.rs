//! Adam optimizer with decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{GzslError, Result};
use crate::numerics::matrix::Matrix;

fn default_lr() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.92
}
fn default_beta2() -> f64 {
    0.98
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: default_weight_decay(),
            epsilon: default_epsilon(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GzslError::Config("learning rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(GzslError::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(GzslError::Config("weight decay must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(GzslError::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer state for a single parameter matrix.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: Matrix,
    second_moment: Matrix,
}

impl AdamState {
    pub fn new(config: AdamConfig, rows: usize, cols: usize) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&Matrix, &Matrix) {
        (&self.first_moment, &self.second_moment)
    }
}

/// One Adam step on `param`.
///
/// Weight decay is decoupled: the parameter is scaled by
/// `1 - lr * weight_decay` before the moment update. Moments are
/// bias-corrected with the incremented step counter.
pub fn adam_update(state: &mut AdamState, param: &mut Matrix, grad: &Matrix) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.first_moment.shape() {
        return Err(GzslError::shape(format!(
            "adam_update: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.first_moment.shape()
        )));
    }
    let cfg = &state.config;
    if cfg.weight_decay != 0.0 {
        param.scale(1.0 - cfg.learning_rate * cfg.weight_decay);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let p = param.as_mut_slice();
    let m = state.first_moment.as_mut_slice();
    let v = state.second_moment.as_mut_slice();
    let g = grad.as_slice();
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Adam over a set of named parameters; per-parameter state is created
/// lazily on first update.
#[derive(Debug)]
pub struct AdamOptimizer {
    config: AdamConfig,
    states: HashMap<String, AdamState>,
}

impl AdamOptimizer {
    pub fn new(config: AdamConfig) -> Self {
        AdamOptimizer {
            config,
            states: HashMap::new(),
        }
    }

    pub fn apply(&mut self, id: &str, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        let state = self
            .states
            .entry(id.to_string())
            .or_insert_with(|| AdamState::new(self.config, param.rows(), param.cols()));
        adam_update(state, param, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamConfig {
        AdamConfig {
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let config = cfg(0.0);
        let mut state = AdamState::new(config, 1, 3);
        let mut param = Matrix::from_vec(1, 3, vec![0.5, -0.25, 2.0]).unwrap();
        let before = param.clone();
        let grad = Matrix::from_vec(1, 3, vec![3.0, -0.7, 0.001]).unwrap();
        adam_update(&mut state, &mut param, &grad).unwrap();
        for i in 0..3 {
            let step = before.at(0, i) - param.at(0, i);
            let expected = config.learning_rate * grad.at(0, i).signum();
            // epsilon shifts the magnitude by at most eps/|g|
            assert!(
                (step - expected).abs() < config.learning_rate * 1e-4,
                "step {step} vs {expected}"
            );
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity_on_fresh_state() {
        let mut state = AdamState::new(cfg(0.0), 2, 2);
        let mut param = Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let before = param.clone();
        let grad = Matrix::zeros(2, 2);
        adam_update(&mut state, &mut param, &grad).unwrap();
        assert_eq!(param, before);
        let (m, v) = state.moments();
        assert!(m.as_slice().iter().all(|&x| x == 0.0));
        assert!(v.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn matches_hand_unrolled_reference_over_three_steps() {
        // Straight-line reimplementation of the update rule on scalars.
        let (lr, b1, b2, wd, eps) = (5e-4, 0.92, 0.98, 1e-4, 1e-8);
        let grad_value = 1.0;
        let mut expected = [1.0, 2.0, 3.0, 4.0];
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1) * grad_value;
            v = b2 * v + (1.0 - b2) * grad_value * grad_value;
            let m_hat = m / (1.0 - f64::powi(b1, t));
            let v_hat = v / (1.0 - f64::powi(b2, t));
            for p in &mut expected {
                *p *= 1.0 - lr * wd;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }

        let mut state = AdamState::new(cfg(wd), 2, 2);
        let mut param = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let grad = Matrix::from_vec(2, 2, vec![grad_value; 4]).unwrap();
        for _ in 0..3 {
            adam_update(&mut state, &mut param, &grad).unwrap();
        }
        for (i, &e) in expected.iter().enumerate() {
            assert!(
                (param.as_slice()[i] - e).abs() < 1e-12,
                "param[{i}] = {} vs {e}",
                param.as_slice()[i]
            );
        }
        assert_eq!(state.step_count(), 3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut state = AdamState::new(cfg(0.0), 1, 2);
        let mut param = Matrix::zeros(1, 2);
        let grad = Matrix::zeros(2, 1);
        assert!(adam_update(&mut state, &mut param, &grad).is_err());
    }
}
