//! Adam and momentum SGD with per-parameter learning-rate multipliers, plus
//! the cosine annealing schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    SgdMomentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
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
fn default_momentum() -> f64 {
    0.9
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd_momentum(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum {
            momentum,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    id: ParamId,
    lr_mult: f64,
    first: Vec<T>,
    second: Vec<T>,
}

/// Optimizer state: moments (Adam) or velocity (SGD) per registered
/// parameter, the step counter and each parameter's LR multiplier.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    step: u64,
    slots: Vec<Slot<T>>,
}

impl<T: Float> Optimizer<T> {
    /// Register every trainable parameter; `lr_mult` maps a parameter name to
    /// its learning-rate multiplier.
    pub fn new(kind: OptimizerKind, store: &ParamStore<T>, lr_mult: impl Fn(&str) -> f64) -> Self {
        let slots = store
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(id, p)| {
                let len = p.value().len();
                Slot {
                    id,
                    lr_mult: lr_mult(p.name()),
                    first: vec![T::zero(); len],
                    second: match kind {
                        OptimizerKind::Adam { .. } => vec![T::zero(); len],
                        OptimizerKind::SgdMomentum { .. } => Vec::new(),
                    },
                }
            })
            .collect();
        Optimizer {
            kind,
            step: 0,
            slots,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate actually applied to `id` for a global rate `lr`.
    pub fn effective_lr(&self, id: ParamId, lr: f64) -> Option<f64> {
        self.slots.iter().find(|s| s.id == id).map(|s| lr * s.lr_mult)
    }

    /// One update with global learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for slot in &self.slots {
            if store.get(slot.id).grad().is_none() {
                return Err(Error::MissingGrad(store.get(slot.id).name().to_string()));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                adam_step(&mut self.slots, store, lr, beta1, beta2, eps, self.step)
            }
            OptimizerKind::SgdMomentum {
                momentum,
                weight_decay,
            } => sgd_momentum_step(&mut self.slots, store, lr, momentum, weight_decay),
        }
        Ok(())
    }
}

fn adam_step<T: Float>(
    slots: &mut [Slot<T>],
    store: &mut ParamStore<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let eps = T::from_f64_lossy(eps);
    let inv_bc1 = T::from_f64_lossy(1.0 / bc1);
    let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
    for slot in slots.iter_mut() {
        let step = T::from_f64_lossy(lr * slot.lr_mult);
        let p = store.get_mut(slot.id);
        let g = p.grad().expect("checked above").data().to_vec();
        let value = p.value_mut().data_mut();
        for i in 0..value.len() {
            let gi = g[i];
            slot.first[i] = b1 * slot.first[i] + one_b1 * gi;
            slot.second[i] = b2 * slot.second[i] + one_b2 * gi * gi;
            let m_hat = slot.first[i] * inv_bc1;
            let denom = slot.second[i].sqrt() * inv_sqrt_bc2 + eps;
            value[i] -= step * m_hat / denom;
        }
    }
}

fn sgd_momentum_step<T: Float>(
    slots: &mut [Slot<T>],
    store: &mut ParamStore<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let mu = T::from_f64_lossy(momentum);
    let wd = T::from_f64_lossy(weight_decay);
    for slot in slots.iter_mut() {
        let step = T::from_f64_lossy(lr * slot.lr_mult);
        let p = store.get_mut(slot.id);
        let g = p.grad().expect("checked above").data().to_vec();
        let value = p.value_mut().data_mut();
        for i in 0..value.len() {
            let gi = g[i] + wd * value[i];
            slot.first[i] = mu * slot.first[i] + gi;
            value[i] -= step * slot.first[i];
        }
    }
}

/// Cosine annealing from `lr0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok((0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0))
}
