//! First-order optimizers over the trainable tensors of a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            _ => Err(Error::Value(format!("unknown optimizer {s:?} (adam, sgd)"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state; moments are kept per parameter id.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    step: i32,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32, store: &ParamStore<f32>) -> Self {
        let moments = || -> Vec<Option<Vec<f32>>> {
            store
                .entries()
                .iter()
                .map(|e| (kind == OptimizerKind::Adam && e.kind.trainable()).then(|| vec![0.0; e.tensor.numel()]))
                .collect()
        };
        Self { kind, lr, step: 0, m: moments(), v: moments() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update; `grads` is indexed by parameter id.
    pub fn apply(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) {
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
                    if let Some(g) = g {
                        for (p, &d) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                            *p -= lr * d;
                        }
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
                let c1 = 1.0 - b1.powi(self.step);
                let c2 = 1.0 - b2.powi(self.step);
                let eps = ADAM_EPS as f32;
                for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                    let (Some(g), Some(m), Some(v)) = (grads.get(i).and_then(|g| g.as_ref()), &mut self.m[i], &mut self.v[i])
                    else {
                        continue;
                    };
                    let p = store.get_mut(id).data_mut();
                    for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
