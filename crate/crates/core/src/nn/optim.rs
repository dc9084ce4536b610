use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::graph::Mat;
use super::params::ParamStore;

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.01
}

impl OptimizerSpec {
    pub fn adamw(lr: f64) -> Self {
        OptimizerSpec {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_wd(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Adam with decoupled weight decay. Decay skips `1×n` tensors (biases,
/// norm scales, tokens).
pub struct AdamW {
    spec: OptimizerSpec,
    step: u64,
    moments: BTreeMap<String, (Mat, Mat)>,
}

impl AdamW {
    pub fn new(spec: OptimizerSpec) -> Self {
        AdamW {
            spec,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update for every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Mat>) {
        self.step += 1;
        let OptimizerSpec {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.spec;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Array2::zeros(grad.dim()), Array2::zeros(grad.dim())));
            let decay = if param.nrows() > 1 { weight_decay } else { 0.0 };
            Zip::from(&mut *param)
                .and(&mut *m)
                .and(&mut *v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * decay * *p;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
