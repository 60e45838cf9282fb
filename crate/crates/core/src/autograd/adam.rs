//! Adam parameter updates with bias-corrected moment estimates.

use std::collections::BTreeMap;

use super::{AutogradError, ParameterSet, Tensor};

/// Optimizer state: first/second moment estimates per parameter plus the
/// global step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Fresh state for `params` with the standard coefficients
    /// (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) and zeroed moments.
    pub fn new(learning_rate: f64, params: &ParameterSet) -> Self {
        let m = params
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros_like(t)))
            .collect();
        let v = params
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros_like(t)))
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter, in name order.
///
/// `grads` must contain a gradient of matching shape for every parameter;
/// the moments advance together with the shared step counter.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
) -> Result<(), AutogradError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, theta) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| AutogradError::MissingGradient { name: name.clone() })?;
        if g.shape() != theta.shape() {
            return Err(AutogradError::ShapeMismatch {
                op: "adam_step",
                detail: format!("parameter {name:?}: {:?} vs gradient {:?}", theta.shape(), g.shape()),
            });
        }
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| AutogradError::OptimizerShapeMismatch { name: name.clone() })?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| AutogradError::OptimizerShapeMismatch { name: name.clone() })?;
        if m.shape() != theta.shape() || v.shape() != theta.shape() {
            return Err(AutogradError::OptimizerShapeMismatch { name: name.clone() });
        }
        for i in 0..theta.len() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            theta.data_mut()[i] -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
        }
        if !theta.is_finite() {
            return Err(AutogradError::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(vec![value]));
        p
    }

    #[test]
    fn first_step_moves_parameter_by_about_the_learning_rate() {
        // With a constant gradient the bias-corrected ratio is g/|g|, so the
        // very first update is ≈ lr regardless of the gradient's size.
        let mut params = single_param(1.0);
        let mut grads = ParameterSet::new();
        grads.insert("w", Tensor::vector(vec![0.1]));
        let mut state = AdamState::new(0.001, &params);
        adam_step(&mut params, &grads, &mut state).unwrap();
        let moved = 1.0 - params.get("w").unwrap().data()[0];
        assert!((moved - 0.001).abs() < 1e-6, "moved {moved}");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn constant_gradient_keeps_step_size_stable() {
        let mut params = single_param(0.0);
        let mut grads = ParameterSet::new();
        grads.insert("w", Tensor::vector(vec![0.5]));
        let mut state = AdamState::new(0.01, &params);
        let mut prev = 0.0;
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state).unwrap();
            let now = params.get("w").unwrap().data()[0];
            let step = prev - now;
            assert!((step - 0.01).abs() < 1e-4, "step {step}");
            prev = now;
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = single_param(1.0);
        let grads = ParameterSet::new();
        let mut state = AdamState::new(0.001, &params);
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state),
            Err(AutogradError::MissingGradient { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = single_param(1.0);
        let mut grads = ParameterSet::new();
        grads.insert("w", Tensor::vector(vec![0.1, 0.2]));
        let mut state = AdamState::new(0.001, &params);
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state),
            Err(AutogradError::ShapeMismatch { op: "adam_step", .. })
        ));
    }
}
