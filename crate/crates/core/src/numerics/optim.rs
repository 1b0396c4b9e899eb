//! Adam with bias correction and a linear-warmup / inverse-sqrt-decay
//! learning-rate schedule.

use alloc::vec::Vec;

use super::real::Real;
use super::tensor::TensorValue;
use crate::error::{CoreError, Result};

/// `peak * step / warmup` while warming up, then `peak * sqrt(warmup / step)`.
pub fn lr_schedule(step: u64, warmup: u64, peak: f64) -> f64 {
    assert!(step >= 1, "schedule is defined for step >= 1");
    assert!(warmup >= 1, "warmup must be positive");
    if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (warmup as f64 / step as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            peak_lr: 1e-3,
            warmup_steps: 100,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<TensorValue<T>>,
    pub v: Vec<TensorValue<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[&TensorValue<T>], hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: params.iter().map(|p| TensorValue::zeros(p.shape())).collect(),
            v: params.iter().map(|p| TensorValue::zeros(p.shape())).collect(),
        }
    }
}

/// One Adam update over a parameter list; `params[i]`, `grads[i]` and the
/// state moments must shape-match pairwise.
pub fn adam_step<T: Real>(
    params: &mut [&mut TensorValue<T>],
    grads: &[&TensorValue<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CoreError::contract("adam_step: parameter count mismatch"));
    }
    for ((p, g), (m, v)) in params
        .iter()
        .zip(grads)
        .zip(state.m.iter().zip(&state.v))
    {
        if !p.same_shape(g) || !p.same_shape(m) || !p.same_shape(v) {
            return Err(CoreError::contract("adam_step: shape mismatch"));
        }
    }
    state.step += 1;
    let t = state.step;
    let lr = T::from_f64(lr_schedule(t, state.hyper.warmup_steps, state.hyper.peak_lr));
    let b1 = T::from_f64(state.hyper.beta1);
    let b2 = T::from_f64(state.hyper.beta2);
    let eps = T::from_f64(state.hyper.epsilon);
    let bc1 = T::ONE - T::from_f64(state.hyper.beta1.powi(t as i32));
    let bc2 = T::ONE - T::from_f64(state.hyper.beta2.powi(t as i32));

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (T::ONE - b1) * gi;
            let vi = b2 * v.data()[i] + (T::ONE - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_boundary_and_decay() {
        let peak = 1e-3;
        assert_eq!(lr_schedule(100, 100, peak), peak);
        assert!((lr_schedule(50, 100, peak) - peak / 2.0).abs() < 1e-18);
        // 1e-3 * sqrt(100/400) = 5e-4
        assert!((lr_schedule(400, 100, peak) - 5e-4).abs() < 1e-12);
        // continuous at the boundary, strictly decreasing afterwards
        let left = lr_schedule(100, 100, peak);
        let right = lr_schedule(101, 100, peak);
        assert!(right < left && left - right < 1e-5);
        let mut prev = left;
        for step in 101..300 {
            let v = lr_schedule(step, 100, peak);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = TensorValue::vector(vec![1.0f64, -2.0, 3.0]);
        let g = TensorValue::zeros(&[3]);
        let mut state = OptimizerState::new(&[&p], AdamHyper::default());
        let before = p.clone();
        adam_step(&mut [&mut p], &[&g], &mut state).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn hand_evaluated_single_step() {
        // beta1=beta2=0, eps=0, lr(1)=0.1 with warmup 1, peak 0.1:
        // m=g=1, v=1, bias corrections are 1, update = 0.1*1/sqrt(1) = 0.1
        let mut p = TensorValue::scalar(0.5f64);
        let g = TensorValue::scalar(1.0f64);
        let hyper = AdamHyper {
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            peak_lr: 0.1,
            warmup_steps: 1,
        };
        let mut state = OptimizerState::new(&[&p], hyper);
        adam_step(&mut [&mut p], &[&g], &mut state).unwrap();
        assert!((p.item() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn identical_state_identical_result() {
        let mut p1 = TensorValue::vector(vec![0.2f32, -0.4]);
        let mut p2 = p1.clone();
        let g = TensorValue::vector(vec![0.05f32, 0.7]);
        let mut s1 = OptimizerState::new(&[&p1], AdamHyper::default());
        let mut s2 = s1.clone();
        adam_step(&mut [&mut p1], &[&g], &mut s1).unwrap();
        adam_step(&mut [&mut p2], &[&g], &mut s2).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_is_a_contract_violation() {
        let mut p = TensorValue::vector(vec![1.0f64, 2.0]);
        let g = TensorValue::vector(vec![1.0f64]);
        let mut state = OptimizerState::new(&[&p], AdamHyper::default());
        assert!(matches!(
            adam_step(&mut [&mut p], &[&g], &mut state),
            Err(CoreError::Contract(_))
        ));
    }
}
