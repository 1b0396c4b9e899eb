//! Central-difference verification of analytic gradients.
//!
//! Meant to run in 64-bit mode; at 32-bit the difference quotient drowns in
//! rounding noise.

use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::tensor::TensorValue;
use crate::error::{CoreError, Result};

/// Relative error with the absolute floor used throughout verification:
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks the analytic gradient of `build` (a scalar loss over the given
/// leaves) against central differences, returning the max relative error
/// over all leaf coordinates.
///
/// `build` must be deterministic: any randomness (Gumbel noise, masking)
/// has to be frozen before the closure is constructed.
pub fn grad_check<F>(build: F, leaves: &[TensorValue<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[TensorValue<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(CoreError::numeric("non-finite loss in grad_check"));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    if !g.value(out).item().is_finite() {
        return Err(CoreError::numeric("non-finite loss at the check point"));
    }
    g.backward(out);

    let mut max_err = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = g
            .grad(vars[li])
            .cloned()
            .unwrap_or_else(|| TensorValue::zeros(leaf.shape()));
        for ci in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[ci] += epsilon;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[ci] -= epsilon;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * epsilon);
            let err = rel_err(analytic.data()[ci], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
