//! Momentum SGD with L2 weight decay and a step-decay schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rate multiplied by `gamma` at each milestone, milestones given as
/// fractions of the total epoch count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            milestones: vec![0.6, 0.85],
            gamma: 0.1,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("schedule milestones must be fractions in [0, 1]".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("schedule gamma must be positive".into()));
        }
        Ok(())
    }

    /// Rate for zero-based `epoch` out of `epochs`.
    pub fn lr(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * epochs as f64).round() as usize)
            .count();
        base * self.gamma.powi(passed as i32)
    }
}

pub struct Sgd {
    vars: Vec<(String, Var)>,
    momentum: f64,
    weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(vars: Vec<(String, Var)>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            vars,
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    /// Momentum buffers keyed by variable name.
    pub fn state(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn load_state(&mut self, state: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, buf) in &state {
            let Some((_, var)) = self.vars.iter().find(|(n, _)| n == name) else {
                return Err(Error::Checkpoint(format!("optimizer state for unknown parameter {name}")));
            };
            if buf.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("optimizer state for {name} has wrong shape")));
            }
        }
        self.buffers = state;
        Ok(())
    }

    /// `buf = momentum * buf + (g + wd * w)`, `w -= lr * buf`. Parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // detached so the buffers never hold on to earlier graphs
            let w = var.as_tensor().detach();
            let g = if self.weight_decay != 0.0 {
                (g.detach() + (&w * self.weight_decay)?)?
            } else {
                g.detach()
            };
            let buf = match self.buffers.get(name) {
                Some(b) if self.momentum != 0.0 => ((b * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(w - (&buf * lr)?)?)?;
            self.buffers.insert(name.clone(), buf);
        }
        Ok(())
    }
}
