//! Adam optimizer state and the one-cycle learning-rate schedule.

use super::Matrix;
use crate::num::{real, Real};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<R> {
    pub m: Vec<Matrix<R>>,
    pub v: Vec<Matrix<R>>,
    pub step: u64,
}

impl<R: Real> AdamState<R> {
    pub fn for_params(params: &[Matrix<R>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place over aligned parameter/gradient
/// lists. Deterministic: a fixed traversal order and no reductions.
pub fn adam_step<R: Real>(
    params: &mut [Matrix<R>],
    grads: &[Matrix<R>],
    state: &mut AdamState<R>,
    lr: R,
    hp: &AdamParams,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    state.step += 1;
    let b1 = real::<R>(hp.beta1);
    let b2 = real::<R>(hp.beta2);
    let eps = real::<R>(hp.eps);
    let bc1 = R::one() - real::<R>(hp.beta1.powi(state.step as i32));
    let bc2 = R::one() - real::<R>(hp.beta2.powi(state.step as i32));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "parameter {i} shape mismatch");
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = b1 * m.data[k] + (R::one() - b1) * gk;
            v.data[k] = b2 * v.data[k] + (R::one() - b2) * gk * gk;
            let m_hat = m.data[k] / bc1;
            let v_hat = v.data[k] / bc2;
            p.data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// One-cycle learning rate: cosine warmup from `lr_max/div` to `lr_max` over
/// the first `pct_start` of training, then cosine anneal to
/// `lr_max/final_div`.
pub fn onecycle_lr(step: usize, total_steps: usize, lr_max: f64, pct_start: f64, div: f64, final_div: f64) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    assert!(total_steps > 0 && (0.0..1.0).contains(&pct_start));
    let warm_steps = (pct_start * total_steps as f64).round().max(1.0);
    let cos_blend = |from: f64, to: f64, t: f64| {
        to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    };
    if (step as f64) < warm_steps {
        cos_blend(lr_max / div, lr_max, step as f64 / warm_steps)
    } else {
        let t = (step as f64 - warm_steps) / (total_steps as f64 - warm_steps).max(1.0);
        cos_blend(lr_max, lr_max / final_div, t)
    }
}
