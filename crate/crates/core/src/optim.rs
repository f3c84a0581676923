//! First-order optimizers over [`ModelParams`].

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// Adaptive moment estimation.
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    first: Option<ModelParams>,
    second: Option<ModelParams>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, step: 0, first: None, second: None }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Updates every tensor with learning rate `lr * scale(name)`; a scale of
    /// zero freezes the tensor.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, scale: impl Fn(&str) -> f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((name, mut p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    let k = scale(&name);
                    if k != 0.0 {
                        p.scaled_add(-self.lr * k, &g);
                    }
                }
            }
            OptimizerKind::Adam => {
                let first = self.first.get_or_insert_with(|| params.zeros_like());
                let second = self.second.get_or_insert_with(|| params.zeros_like());
                let c1 = 1.0 - ADAM_BETA1.powi(self.step);
                let c2 = 1.0 - ADAM_BETA2.powi(self.step);
                let tensors = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(first.tensors_mut())
                    .zip(second.tensors_mut());
                for ((((name, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
                    let lr = self.lr * scale(&name);
                    if lr == 0.0 {
                        continue;
                    }
                    ndarray::Zip::from(&mut p)
                        .and(&g)
                        .and(&mut m)
                        .and(&mut v)
                        .for_each(|p, &g, m, v| {
                            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
                        });
                }
            }
        }
    }
}
