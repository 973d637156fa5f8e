//! Adam with optional global-norm clipping.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| alloc::vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    params.check_layout("adam_step", grads)?;
    if state.m.len() != params.len() {
        return Err(crate::error::dim_err(
            "adam_step",
            alloc::format!("{} moment buffers", params.len()),
            alloc::format!("{}", state.m.len()),
        ));
    }
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - math::powi(cfg.beta1, t);
    let bc2 = 1.0 - math::powi(cfg.beta2, t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads.tensors()[i].data();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= cfg.lr * m_hat / (math::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so its global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(1.5);
        let g = single(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.tensors()[0].data(), &[1.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // at t = 1 the bias-corrected update is lr * g / (|g| + eps)
        for g0 in [0.3, -2.0, 1e-3] {
            let mut p = single(0.0);
            let g = single(g0);
            let mut st = AdamState::new(&p);
            let cfg = AdamConfig::default();
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            let expected = -cfg.lr * g0 / (g0.abs() + cfg.eps);
            assert!((p.tensors()[0].data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = ParamStore::new();
            p.insert("a", Tensor::matrix(1, 3, vec![0.1, -0.2, 0.3]).unwrap()).unwrap();
            let mut st = AdamState::new(&p);
            for k in 0..5 {
                let mut g = p.zeros_like();
                for (j, x) in g.tensors_mut()[0].data_mut().iter_mut().enumerate() {
                    *x = (k as f64 + 1.0) * (j as f64 - 1.0);
                }
                adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
            }
            p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_never_increases_norm() {
        let mut g = ParamStore::new();
        g.insert("a", Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap()).unwrap();
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        let mut small = g.clone();
        clip_grad_norm(&mut small, 10.0);
        assert_eq!(small, g);
    }
}
