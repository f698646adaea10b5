//! First-order optimizers over a [`ParamStore`].

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
    SgdMomentum,
    /// Adam with bias correction.
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SgdMomentum => "sgd",
            Self::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "momentum" => Ok(Self::SgdMomentum),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!(
                "unknown optimizer {s:?} (expected sgd or adam)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Gradients for frozen or unknown tensors are an error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Vec<f32>)]) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Input(format!("gradient for unknown parameter {name}")))?;
            if !p.requires_grad {
                return Err(Error::Input(format!(
                    "gradient for frozen parameter {name}"
                )));
            }
            if g.len() != p.numel() {
                return Err(Error::dim(
                    "optimizer",
                    format!(
                        "gradient of {name} has {} values, parameter {}",
                        g.len(),
                        p.numel()
                    ),
                ));
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()) {
                        *vi = self.momentum * *vi + gi as f64;
                        *w = (*w as f64 - self.lr * *vi) as f32;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for (((w, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let gi = gi as f64;
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                        let step = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                        *w = (*w as f64 - step) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
