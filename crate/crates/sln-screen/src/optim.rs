//! Parameter updates: plain SGD or Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
pub struct OptimizerState<T: Scalar> {
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &Model<T>) -> Self {
        OptimizerState {
            step: 0,
            m: model.zero_grads(),
            v: model.zero_grads(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }
}

/// Advance the optimizer one step, updating the model in place.
pub fn apply_update<T: Scalar>(
    model: &mut Model<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    config: &OptimizerConfig,
) -> Result<()> {
    {
        let params = model.params();
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                context: "apply_update grads".into(),
                left: format!("[{}]", grads.len()),
                right: format!("[{}]", params.len()),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    context: "apply_update grad tensor".into(),
                    left: format!("{:?}", g.shape()),
                    right: format!("{:?}", p.shape()),
                });
            }
        }
    }

    state.step += 1;
    let lr = T::from_f64(config.learning_rate);
    match config.kind {
        OptimizerKind::Sgd => {
            for (p, g) in model.params_mut().into_iter().zip(grads) {
                for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *w = *w - lr * gv;
                }
            }
        }
        OptimizerKind::Adam => {
            let b1 = T::from_f64(ADAM_BETA1);
            let b2 = T::from_f64(ADAM_BETA2);
            let eps = T::from_f64(ADAM_EPSILON);
            let bias1 = T::from_f64(1.0 - ADAM_BETA1.powi(state.step as i32));
            let bias2 = T::from_f64(1.0 - ADAM_BETA2.powi(state.step as i32));
            for (((p, g), m), v) in model
                .params_mut()
                .into_iter()
                .zip(grads)
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                for (((w, &gv), mv), vv) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mv = b1 * *mv + (T::one() - b1) * gv;
                    *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                    let m_hat = *mv / bias1;
                    let v_hat = *vv / bias2;
                    *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ModelConfig};

    fn tiny_model(seed: u64) -> Model<f32> {
        build_model(&ModelConfig::with_input([8, 8, 1], &[2], 4, 0.0, seed)).unwrap()
    }

    #[test]
    fn sgd_with_unit_learning_rate_subtracts_gradient() {
        let mut model = tiny_model(3);
        let before = model.flat_params();
        let grads: Vec<Tensor<f32>> = model
            .params()
            .iter()
            .map(|p| Tensor::from_fn(p.shape(), |i| (i % 5) as f32 * 0.1))
            .collect();
        let mut state = OptimizerState::new(&model);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1.0,
        };
        apply_update(&mut model, &grads, &mut state, &cfg).unwrap();
        let after = model.flat_params();
        let flat_grads: Vec<f32> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        for ((b, a), g) in before.iter().zip(&after).zip(&flat_grads) {
            assert_eq!(*a, b - g);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut model = tiny_model(5);
        let before = model.flat_params();
        let grads: Vec<Tensor<f32>> = model
            .params()
            .iter()
            .map(|p| Tensor::from_fn(p.shape(), |i| if i % 2 == 0 { 0.37 } else { -1.9 }))
            .collect();
        let mut state = OptimizerState::new(&model);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
        };
        apply_update(&mut model, &grads, &mut state, &cfg).unwrap();
        let after = model.flat_params();
        let flat_grads: Vec<f32> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        for ((b, a), g) in before.iter().zip(&after).zip(&flat_grads) {
            let step = (b - a) as f64;
            let want = 1e-3 * g.signum() as f64;
            assert!((step - want).abs() / want.abs() < 1e-3, "step {step} vs {want}");
        }
    }

    #[test]
    fn zero_gradients_leave_weights_unchanged() {
        let mut model = tiny_model(7);
        let before = model.flat_params();
        let grads = model.zero_grads();
        let mut state = OptimizerState::new(&model);
        apply_update(&mut model, &grads, &mut state, &OptimizerConfig::default()).unwrap();
        assert_eq!(model.flat_params(), before);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn zero_learning_rate_is_identity_on_weights() {
        let mut model = tiny_model(9);
        let before = model.flat_params();
        let grads: Vec<Tensor<f32>> = model
            .params()
            .iter()
            .map(|p| Tensor::filled(p.shape(), 0.5))
            .collect();
        let mut state = OptimizerState::new(&model);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 0.0,
        };
        apply_update(&mut model, &grads, &mut state, &cfg).unwrap();
        assert_eq!(model.flat_params(), before);
    }

    #[test]
    fn mismatched_grad_shapes_are_rejected() {
        let mut model = tiny_model(11);
        let grads = vec![Tensor::<f32>::zeros(&[2, 2])];
        let mut state = OptimizerState::new(&model);
        assert!(apply_update(&mut model, &grads, &mut state, &OptimizerConfig::default()).is_err());
    }
}
