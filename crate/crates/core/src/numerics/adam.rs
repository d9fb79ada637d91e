//! Adam with bias correction and decoupled weight decay, plus the step-decay
//! learning-rate schedule used by the trainer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub weight_decay: f64,
}

impl AdamState {
    /// Zeroed accumulators shaped like `params`.
    pub fn new(params: &[Tensor], config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Ok(Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps_adam: config.eps,
            weight_decay: config.weight_decay,
        })
    }
}

/// One Adam update in place. The bias-corrected step is applied first, then
/// every parameter shrinks by `lr · weight_decay` of its updated value.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || !p.same_shape(&state.first_moment[i]) {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!(
                    "tensor {i}: param {:?}, grad {:?}, accumulator {:?}",
                    p.shape(),
                    g.shape(),
                    state.first_moment[i].shape()
                ),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = state.lr * state.weight_decay;

    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
        state
            .first_moment
            .iter_mut()
            .zip(state.second_moment.iter_mut()),
    ) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((theta, &grad), (m, v)) in it {
            *m = b1 * *m + (1.0 - b1) * grad;
            *v = b2 * *v + (1.0 - b2) * grad * grad;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= state.lr * m_hat / (v_hat.sqrt() + state.eps_adam);
            *theta -= decay * *theta;
        }
    }
    Ok(())
}

/// Learning rate for a 0-based epoch under multiplicative step decay.
pub fn step_decay_lr(base_lr: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        return base_lr;
    }
    base_lr * factor.powi((epoch / every) as i32)
}
