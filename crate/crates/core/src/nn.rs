//! Parameter-aware building blocks shared by the layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, RunningUpdate};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// He-style uniform initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, (6.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub(crate) fn ensure_param(store: &ParamStore, id: ParamId, what: &str) -> Result<()> {
    if id.index() >= store.len() {
        return Err(Error::State(format!("{what}: parameter store does not hold this layer's parameters")));
    }
    Ok(())
}

/// Per-channel batch normalization over axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[channels]), ParamKind::Norm),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::Norm),
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{prefix}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Training mode normalizes with batch statistics and queues a
    /// running-stat update on the graph; eval mode uses the stored stats.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        ensure_param(store, self.running_var, "batch norm")?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                g.push_running_update(RunningUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: mean,
                    batch_var: var,
                    momentum: self.momentum,
                });
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
                self.eps,
            ),
        }
    }
}
