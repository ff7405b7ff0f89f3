//! SGD and Adam parameter updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamRole, ParameterSet};
use super::tensor::Tensor;
use super::{shape_err, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// L2 coefficient; applied to `Weight`-role tensors only, as λ·p added to
    /// the raw gradient.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamMoments<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Mutable optimizer state: step counter plus per-parameter Adam moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState<S> {
    pub config: OptimizerConfig,
    pub step: u64,
    moments: BTreeMap<String, AdamMoments<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Dispatch on the configured optimizer kind.
    pub fn apply(
        &mut self,
        params: &mut ParameterSet<S>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<(), TensorError> {
        match self.config.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, self),
            OptimizerKind::Adam => adam_step(params, grads, self),
        }
    }
}

fn check_shapes<S: Scalar>(
    params: &ParameterSet<S>,
    grads: &BTreeMap<String, Tensor<S>>,
) -> Result<(), TensorError> {
    for (name, grad) in grads {
        let p = params.get(name)?;
        if p.tensor.shape() != grad.shape() {
            return Err(shape_err(
                "optimizer_step",
                format!(
                    "{name}: param {:?} vs grad {:?}",
                    p.tensor.shape(),
                    grad.shape()
                ),
            ));
        }
    }
    Ok(())
}

/// p ← p − lr · (g + λp); λ touches weights only.
pub fn sgd_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut OptimizerState<S>,
) -> Result<(), TensorError> {
    check_shapes(params, grads)?;
    let lr = S::cast(state.config.learning_rate);
    let wd = S::cast(state.config.weight_decay);
    for (name, param) in params.iter_mut() {
        let Some(grad) = grads.get(name) else {
            continue;
        };
        let decay = if param.role == ParamRole::Weight {
            wd
        } else {
            S::zero()
        };
        for (p, &g) in param.tensor.data_mut().iter_mut().zip(grad.data()) {
            *p = *p - lr * (g + decay * *p);
        }
    }
    state.step += 1;
    Ok(())
}

/// Standard Adam with bias correction; L2 enters as λp added to the raw
/// gradient before the moment updates.
pub fn adam_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut OptimizerState<S>,
) -> Result<(), TensorError> {
    check_shapes(params, grads)?;
    state.step += 1;
    let t = state.step;
    let lr = S::cast(state.config.learning_rate);
    let wd = S::cast(state.config.weight_decay);
    let b1 = S::cast(state.config.beta1);
    let b2 = S::cast(state.config.beta2);
    let eps = S::cast(state.config.epsilon);
    let bc1 = S::one() - S::cast(state.config.beta1.powi(t as i32));
    let bc2 = S::one() - S::cast(state.config.beta2.powi(t as i32));
    for (name, param) in params.iter_mut() {
        let Some(grad) = grads.get(name) else {
            continue;
        };
        let n = param.tensor.len();
        let entry = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| AdamMoments {
                m: vec![S::zero(); n],
                v: vec![S::zero(); n],
            });
        let decay = if param.role == ParamRole::Weight {
            wd
        } else {
            S::zero()
        };
        for (((p, &g0), m), v) in param
            .tensor
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(entry.m.iter_mut())
            .zip(entry.v.iter_mut())
        {
            let g = g0 + decay * *p;
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::params::Param;

    fn single_param(value: f64, role: ParamRole) -> ParameterSet<f64> {
        let mut set = ParameterSet::new();
        set.insert(
            "p".into(),
            Param {
                role,
                fan_in: 1,
                tensor: Tensor::scalar(value),
            },
        )
        .unwrap();
        set
    }

    fn grad_of(value: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::scalar(value));
        g
    }

    #[test]
    fn sgd_zero_gradient_leaves_params() {
        let mut params = single_param(1.0, ParamRole::Weight);
        let mut state = OptimizerState::new(OptimizerConfig::sgd(0.01, 0.0));
        sgd_step(&mut params, &grad_of(0.0), &mut state).unwrap();
        assert_eq!(params.get("p").unwrap().tensor.data(), &[1.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn sgd_single_arithmetic_step() {
        let mut params = single_param(1.0, ParamRole::Weight);
        let mut state = OptimizerState::new(OptimizerConfig::sgd(0.01, 0.0));
        sgd_step(&mut params, &grad_of(1.0), &mut state).unwrap();
        assert_eq!(params.get("p").unwrap().tensor.data(), &[0.99]);
    }

    #[test]
    fn sgd_with_weight_decay() {
        let mut params = single_param(1.0, ParamRole::Weight);
        let mut state = OptimizerState::new(OptimizerConfig::sgd(0.01, 1e-4));
        sgd_step(&mut params, &grad_of(1.0), &mut state).unwrap();
        let expect = 1.0 - 0.01 * (1.0 + 1e-4);
        assert!((params.get("p").unwrap().tensor.data()[0] - expect).abs() < 1e-16);
    }

    #[test]
    fn decay_skips_biases() {
        let mut params = single_param(1.0, ParamRole::Bias);
        let mut state = OptimizerState::new(OptimizerConfig::sgd(0.01, 0.5));
        sgd_step(&mut params, &grad_of(0.0), &mut state).unwrap();
        assert_eq!(params.get("p").unwrap().tensor.data(), &[1.0]);
    }

    #[test]
    fn adam_first_step_magnitude_near_lr() {
        for &g in &[0.003, 1.0, -250.0] {
            let mut params = single_param(0.5, ParamRole::Weight);
            let mut state = OptimizerState::new(OptimizerConfig::adam(1e-3, 0.0));
            adam_step(&mut params, &grad_of(g), &mut state).unwrap();
            let delta = params.get("p").unwrap().tensor.data()[0] - 0.5;
            let expect = -1e-3 * g / (g.abs() + 1e-8);
            assert!((delta - expect).abs() < 1e-15, "g {g} delta {delta}");
            assert!(delta.signum() == -g.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_forever_keeps_params() {
        let mut params = single_param(2.0, ParamRole::Weight);
        let mut state = OptimizerState::new(OptimizerConfig::adam(1e-3, 0.0));
        for _ in 0..25 {
            adam_step(&mut params, &grad_of(0.0), &mut state).unwrap();
        }
        assert_eq!(params.get("p").unwrap().tensor.data(), &[2.0]);
    }

    #[test]
    fn adam_matches_scalar_recurrence_on_quadratic() {
        // Minimize f(p) = p²/2 (grad = p) for 10 steps; compare against an
        // independently coded scalar recurrence.
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut params = single_param(1.0, ParamRole::Weight);
        let mut state = OptimizerState::new(OptimizerConfig::adam(lr, 0.0));

        let mut p_ref = 1.0f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        for t in 1..=10u32 {
            let g = params.get("p").unwrap().tensor.data()[0];
            adam_step(&mut params, &grad_of(g), &mut state).unwrap();

            let g_ref = p_ref;
            m = b1 * m + (1.0 - b1) * g_ref;
            v = b2 * v + (1.0 - b2) * g_ref * g_ref;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            p_ref -= lr * m_hat / (v_hat.sqrt() + eps);

            let p_impl = params.get("p").unwrap().tensor.data()[0];
            assert!((p_impl - p_ref).abs() < 1e-10, "step {t}: {p_impl} vs {p_ref}");
        }
    }

    #[test]
    fn replay_reproduces_trajectory_bit_exactly() {
        let run = || {
            let mut params = single_param(1.0, ParamRole::Weight);
            let mut state = OptimizerState::new(OptimizerConfig::adam(0.01, 1e-4));
            for i in 0..20 {
                let g = (i as f64 * 0.37).sin();
                adam_step(&mut params, &grad_of(g), &mut state).unwrap();
            }
            params.get("p").unwrap().tensor.data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn mismatched_grad_shape_is_error() {
        let mut params = single_param(1.0, ParamRole::Weight);
        let mut state = OptimizerState::new(OptimizerConfig::sgd(0.01, 0.0));
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::<f64>::zeros(&[3]));
        assert!(sgd_step(&mut params, &grads, &mut state).is_err());
    }
}
