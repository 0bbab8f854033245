//! First-order optimizers over flat parameter vectors.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Step-wise exponential decay: `base_lr * factor^(step / every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            decay_factor: 1.0,
            decay_every: u64::MAX,
        }
    }

    pub fn multiplier(&self, step: u64) -> f64 {
        if self.decay_every == 0 {
            return 1.0;
        }
        libm::pow(self.decay_factor, (step / self.decay_every) as f64)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.base_lr * self.multiplier(step)
    }
}

impl Default for LrSchedule {
    /// `1e-4`, decayed by `0.9` every 50k iterations.
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            decay_factor: 0.9,
            decay_every: 50_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: Self = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

fn check_grads(params: &[f64], grads: &[f64]) -> Result<()> {
    crate::error::check_len(params.len(), grads.len())?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(())
}

/// Plain gradient descent: `p -= lr * g`. Leaves `params` untouched on error.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule, num_params: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => num_params,
        };
        Self {
            kind,
            schedule,
            step: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    /// Number of steps applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let lr = self.current_lr();
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, lr)?,
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(lr > 0.0) {
                    return Err(Error::Config("learning rate must be positive".into()));
                }
                check_grads(params, grads)?;
                crate::error::check_len(self.m.len(), params.len())?;
                let t = (self.step + 1) as f64;
                let c1 = 1.0 - libm::pow(beta1, t);
                let c2 = 1.0 - libm::pow(beta2, t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}
