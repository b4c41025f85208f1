//! SGD with classic momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::ModelGraph;
use crate::scalar::Scalar;

/// Optimizer hyperparameters and per-parameter velocity buffers.
#[derive(Debug, Clone)]
pub struct SgdState<T> {
    pub lr: f64,
    pub momentum: f64,
    /// Weight-decay coefficient; the decay gradient is `mu * w`.
    pub mu: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(graph: &ModelGraph<T>, lr: f64, momentum: f64, mu: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return config_err(format!("momentum {momentum} outside [0, 1)"));
        }
        if mu < 0.0 || !mu.is_finite() || !lr.is_finite() || lr < 0.0 {
            return config_err(format!("invalid lr {lr} / weight decay {mu}"));
        }
        Ok(Self {
            lr,
            momentum,
            mu,
            velocity: graph
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.tensor.len()])
                .collect(),
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.velocity
    }

    pub fn zero_velocity(&mut self) {
        for v in &mut self.velocity {
            v.fill(T::zero());
        }
    }
}

/// Applies one update to every parameter holding a gradient:
/// `g' = g + mu*w` (decaying roles only), `v = momentum*v + g'`,
/// `w = w - lr*v`. Frozen entries are held at zero with zero velocity.
/// The update is all-or-nothing: a non-finite gradient aborts before any
/// parameter changes.
pub fn sgd_step<T: Scalar>(
    graph: &mut ModelGraph<T>,
    state: &mut SgdState<T>,
    step: usize,
) -> Result<()> {
    if state.velocity.len() != graph.params().len() {
        return config_err("optimizer state does not match the model registry");
    }
    for (p, v) in graph.params().iter().zip(&state.velocity) {
        if v.len() != p.tensor.len() {
            return config_err(format!("velocity for {} has the wrong shape", p.name));
        }
        if let Some(g) = p.tensor.grad() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    what: format!("non-finite gradient in {}[{i}]", p.name),
                    swd_coefficient: None,
                });
            }
        }
    }
    let lr = T::from_f64_lossy(state.lr);
    let momentum = T::from_f64_lossy(state.momentum);
    let mu = T::from_f64_lossy(state.mu);
    for (p, vel) in graph.params_mut().iter_mut().zip(&mut state.velocity) {
        let decay = if p.role.decays() { mu } else { T::zero() };
        let frozen = p.frozen.take();
        let (w, g) = match p.tensor.grad() {
            Some(_) => p.tensor.data_and_grad_mut(),
            None => {
                p.frozen = frozen;
                continue;
            }
        };
        for i in 0..w.len() {
            if frozen.as_ref().is_some_and(|f| f[i]) {
                vel[i] = T::zero();
                w[i] = T::zero();
                continue;
            }
            let eff = g[i] + decay * w[i];
            vel[i] = momentum * vel[i] + eff;
            w[i] = w[i] - lr * vel[i];
        }
        p.frozen = frozen;
    }
    Ok(())
}

/// Learning-rate policy across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `base` for the first third of training, `base/10` for the second,
    /// `base/100` for the last.
    ThreePhase { base: f64 },
}

impl LrSchedule {
    pub fn at(&self, epoch: usize, total_epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::ThreePhase { base } => {
                if epoch < total_epochs.div_ceil(3) {
                    base
                } else if epoch < (2 * total_epochs).div_ceil(3) {
                    base / 10.0
                } else {
                    base / 100.0
                }
            }
        }
    }
}

/// Three-phase schedule starting at 0.1.
pub fn lr_at(epoch: usize, total_epochs: usize) -> f64 {
    LrSchedule::ThreePhase { base: 0.1 }.at(epoch, total_epochs)
}
