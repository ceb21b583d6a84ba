use serde::{Deserialize, Serialize};

use super::model::{Gradients, ModelParams};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

/// Optimizer hyperparameters plus per-parameter slot buffers shaped like the
/// model they update. Weight decay is coupled: `wd * θ` is added to the
/// gradient before anything else, for both kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    /// SGD: `[velocity]`; Adam: `[first moment, second moment]`.
    slots: Vec<ModelParams>,
}

impl OptimizerState {
    pub fn sgd(template: &ModelParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::SgdMomentum { momentum },
            learning_rate,
            weight_decay,
            step_count: 0,
            slots: vec![template.zeros_like()],
        }
    }

    pub fn adam(template: &ModelParams, learning_rate: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            learning_rate,
            weight_decay,
            step_count: 0,
            slots: vec![template.zeros_like(), template.zeros_like()],
        }
    }

    pub fn slots(&self) -> &[ModelParams] {
        &self.slots
    }

    /// Apply one update to `params` in place.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        params.check_same_shape(grads)?;
        for slot in &self.slots {
            params.check_same_shape(slot)?;
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                let velocity = &mut self.slots[0];
                for ((p, g), v) in params.tensors_mut().zip(grads.tensors()).zip(velocity.tensors_mut()) {
                    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = momentum * *v + g + wd * *p;
                        *p -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (first, rest) = self.slots.split_at_mut(1);
                let (m, v) = (&mut first[0], &mut rest[0]);
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut())
                {
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = g + wd * *p;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
