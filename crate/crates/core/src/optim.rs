//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a subset of the tensors in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    registered: Vec<usize>,
    states: Vec<AdamState>,
}

impl Adam {
    /// Register every tensor of `params`.
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        Self::with_registered(cfg, params, (0..params.len()).collect())
    }

    pub fn with_registered(cfg: AdamConfig, params: &ParamSet, registered: Vec<usize>) -> Self {
        let states = registered
            .iter()
            .map(|&i| AdamState::zeros(params.tensor(i).numel()))
            .collect();
        Adam {
            cfg,
            registered,
            states,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// `grads[i]` is the gradient of tensor `i` of `params`; only registered
    /// tensors are updated.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim(format!(
                "adam: {} gradient tensors for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (&i, state) in self.registered.iter().zip(&mut self.states) {
            adam_step(params.tensor_mut(i).data_mut(), &grads[i], state, &self.cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = [0.0];
        let mut st = AdamState::zeros(1);
        adam_step(&mut p, &[1.0], &mut st, &cfg).unwrap();
        // -lr * g / (|g| + eps)
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let cfg = AdamConfig::default();
        let mut p = [0.5, -1.5];
        let mut st = AdamState::zeros(2);
        for _ in 0..3 {
            adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        }
        assert_eq!(p, [0.5, -1.5]);
    }

    #[test]
    fn two_steps_match_scripted_recurrence() {
        let cfg = AdamConfig {
            lr: 0.05,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-6,
        };
        let g = 0.3;
        let mut p = [1.0];
        let mut st = AdamState::zeros(1);
        adam_step(&mut p, &[g], &mut st, &cfg).unwrap();
        adam_step(&mut p, &[g], &mut st, &cfg).unwrap();

        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=2 {
            m = 0.8 * m + 0.2 * g;
            v = 0.99 * v + 0.01 * g * g;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.99f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-6);
        }
        assert!((p[0] - x).abs() <= 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut st = AdamState::zeros(2);
        let mut p = [0.0, 0.0];
        assert!(matches!(
            adam_step(&mut p, &[1.0], &mut st, &AdamConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn unregistered_tensors_untouched() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        ps.insert("b", Tensor::vector(vec![3.0])).unwrap();
        let mut opt = Adam::with_registered(AdamConfig::default(), &ps, vec![0]);
        opt.step(&mut ps, &[vec![1.0, 1.0], vec![1.0]]).unwrap();
        assert_eq!(ps.get("b").unwrap().data(), &[3.0]);
        assert_ne!(ps.get("a").unwrap().data(), &[1.0, 2.0]);
    }
}
