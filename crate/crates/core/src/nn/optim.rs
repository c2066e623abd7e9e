use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd_momentum(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }
}

/// Optimizer with per-parameter buffers that mirror the parameter slices.
///
/// Buffers are shaped on the first step; later steps must pass slices of the
/// same shapes in the same order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    /// Velocity (SGD) or first moment (Adam).
    first: Vec<Vec<f64>>,
    /// Second moment (Adam only).
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        match kind {
            OptimizerKind::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::InvalidInput(format!(
                    "momentum must be in [0, 1), got {momentum}"
                )))
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } if !(0.0..1.0).contains(&beta1)
                || !(0.0..1.0).contains(&beta2)
                || !(epsilon > 0.0) =>
            {
                return Err(Error::InvalidInput("invalid adam hyperparameters".into()))
            }
            _ => {}
        }
        Ok(Self {
            kind,
            learning_rate,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn ensure_buffers(&mut self, grads: &[&[f64]]) -> Result<()> {
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
            return Ok(());
        }
        if self.first.len() != grads.len()
            || self
                .first
                .iter()
                .zip(grads)
                .any(|(b, g)| b.len() != g.len())
        {
            return Err(Error::InvalidInput(
                "gradient shapes changed between optimizer steps".into(),
            ));
        }
        Ok(())
    }

    /// Applies one update. Rejects non-finite gradients before touching any
    /// parameter, reporting the flat index of the first offender.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::InvalidInput(
                "parameter and gradient shapes disagree".into(),
            ));
        }
        let mut offset = 0;
        for g in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    index: offset + i,
                    context: "gradient".into(),
                });
            }
            offset += g.len();
        }
        self.ensure_buffers(grads)?;
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for i in 0..p.len() {
                        v[i] = momentum * v[i] - lr * g[i];
                        p[i] += v[i];
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), s) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        s[i] = beta2 * s[i] + (1.0 - beta2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let sh = s[i] / c2;
                        p[i] -= lr * mh / (sh.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
