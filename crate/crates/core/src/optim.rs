//! First-order optimizers over flat parameter buffers.

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    Sgd {
        lr: f32,
        momentum: f32,
        weight_decay: f32,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
    },
}

impl OptimizerConfig {
    pub fn sgd(lr: f32) -> Self {
        Self::Sgd {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn adam(lr: f32) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f32 {
        match *self {
            Self::Sgd { lr, .. } | Self::Adam { lr, .. } => lr,
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        match *self {
            Self::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                kv.set("kind", "sgd")
                    .set("lr", lr)
                    .set("momentum", momentum)
                    .set("weight_decay", weight_decay);
            }
            Self::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                kv.set("kind", "adam")
                    .set("lr", lr)
                    .set("beta1", beta1)
                    .set("beta2", beta2)
                    .set("eps", eps)
                    .set("weight_decay", weight_decay);
            }
        }
        kv
    }

    /// Reads `kind` (`sgd` or `adam`, default `adam`) plus its fields;
    /// absent fields take the constructor defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let kind = kv.raw("kind").unwrap_or("adam");
        let lr = kv.require("lr")?;
        let cfg = match kind {
            "sgd" => {
                kv.reject_unknown(&["kind", "lr", "momentum", "weight_decay"])?;
                Self::Sgd {
                    lr,
                    momentum: kv.get_or("momentum", 0.0)?,
                    weight_decay: kv.get_or("weight_decay", 0.0)?,
                }
            }
            "adam" => {
                kv.reject_unknown(&["kind", "lr", "beta1", "beta2", "eps", "weight_decay"])?;
                let d = Self::adam(lr);
                let Self::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } = d
                else {
                    unreachable!()
                };
                Self::Adam {
                    lr,
                    beta1: kv.get_or("beta1", beta1)?,
                    beta2: kv.get_or("beta2", beta2)?,
                    eps: kv.get_or("eps", eps)?,
                    weight_decay: kv.get_or("weight_decay", weight_decay)?,
                }
            }
            other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
        };
        if !(cfg.lr() > 0.0 && cfg.lr().is_finite()) {
            return Err(Error::Config(format!("learning rate {}", cfg.lr())));
        }
        Ok(cfg)
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            lr: config.lr(),
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    /// Overrides the learning rate for subsequent steps (for schedules).
    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Applies one update. Gradients are checked for NaN/Inf before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {i} has {} elements, gradient {}",
                    p.numel(),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: i });
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if matches!(self.config, OptimizerConfig::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != grads.len() {
            return Err(Error::ShapeMismatch(
                "optimizer state bound to other parameters".into(),
            ));
        }
        self.steps += 1;
        let lr = self.lr;
        match self.config {
            OptimizerConfig::Sgd {
                momentum,
                weight_decay,
                ..
            } => {
                for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &gi), b) in p.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
                        let d = gi + weight_decay * *w;
                        let d = if momentum > 0.0 {
                            *b = momentum * *b + d;
                            *b
                        } else {
                            d
                        };
                        *w -= lr * d;
                    }
                }
            }
            OptimizerConfig::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        // Decoupled weight decay.
                        *w -= lr * weight_decay * *w;
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}
