//! Optimizers and the step-decay learning-rate schedule.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Learning rate in effect during `epoch` (0-based): `lr * gamma^(epoch / step)`.
pub fn scheduled_lr(base: f64, gamma: f64, step: usize, epoch: usize) -> f64 {
    base * gamma.powi((epoch / step) as i32)
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: i32,
        m: Vec<ArrayD<f64>>,
        v: Vec<ArrayD<f64>>,
    },
    Sgd {
        momentum: f64,
        velocity: Vec<ArrayD<f64>>,
    },
}

impl Optimizer {
    pub fn adam(store: &ParamStore) -> Self {
        let zeros: Vec<_> = store.ids().map(|id| ArrayD::zeros(store.get(id).raw_dim())).collect();
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn sgd(store: &ParamStore, momentum: f64) -> Self {
        Optimizer::Sgd {
            momentum,
            velocity: store.ids().map(|id| ArrayD::zeros(store.get(id).raw_dim())).collect(),
        }
    }

    pub fn new(kind: OptimizerKind, store: &ParamStore, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(store),
            OptimizerKind::Sgd => Self::sgd(store, momentum),
        }
    }

    /// Applies one update to every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        match self {
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t);
                let bc2 = 1.0 - beta2.powi(*t);
                for id in ids {
                    if !store.is_trainable(id) {
                        continue;
                    }
                    let i = id.index();
                    let g = grads.get(id);
                    let p = store.get_mut(id);
                    ndarray::Zip::from(p)
                        .and(&mut m[i])
                        .and(&mut v[i])
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = *beta1 * *m + (1.0 - *beta1) * g;
                            *v = *beta2 * *v + (1.0 - *beta2) * g * g;
                            let m_hat = *m / bc1;
                            let v_hat = *v / bc2;
                            *p -= lr * m_hat / (v_hat.sqrt() + *eps);
                        });
                }
            }
            Optimizer::Sgd { momentum, velocity } => {
                for id in ids {
                    if !store.is_trainable(id) {
                        continue;
                    }
                    let i = id.index();
                    let g = grads.get(id);
                    let p = store.get_mut(id);
                    ndarray::Zip::from(p)
                        .and(&mut velocity[i])
                        .and(g)
                        .for_each(|p, vel, &g| {
                            *vel = *momentum * *vel + g;
                            *p -= lr * *vel;
                        });
                }
            }
        }
    }
}
