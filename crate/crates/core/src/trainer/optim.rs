//! First-order optimizers over the model's parameter slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    /// Adam with decoupled weight decay: parameters are shrunk by
    /// `lr * weight_decay` before the moment update instead of folding the
    /// decay into the gradient.
    AdamW,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?}; expected sgd, adam or adamw"
            ))),
        }
    }
}

/// Optimizer state. Moment buffers follow the slot order of
/// [`ModelParams::slots`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        lr: f64,
        weight_decay: f64,
        params: &ModelParams,
    ) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and positive, got {lr}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be finite and non-negative, got {weight_decay}"
            )));
        }
        let zeros: Vec<Matrix> = params
            .slots()
            .iter()
            .map(|s| Matrix::zeros(s.rows(), s.cols()))
            .collect();
        Ok(Optimizer {
            kind,
            lr,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Applies one update. `grads` must match the slot order and shapes of
    /// `params`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Matrix]) -> Result<()> {
        let mut slots = params.slots_mut();
        if grads.len() != slots.len() {
            return Err(Error::Contract(format!(
                "optimizer got {} gradients for {} parameter slots",
                grads.len(),
                slots.len()
            )));
        }
        self.t += 1;
        for (i, slot) in slots.iter_mut().enumerate() {
            let g = &grads[i];
            if !g.same_shape(slot) {
                return Err(Error::Contract(format!(
                    "gradient {i} is {}x{} but the slot is {}x{}",
                    g.rows(),
                    g.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let (lr, wd) = (self.lr, self.weight_decay);
                    let w = slot.as_mut_slice();
                    for (w, &g) in w.iter_mut().zip(g.as_slice()) {
                        *w -= lr * (g + wd * *w);
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let decoupled = self.kind == OptimizerKind::AdamW;
                    let (lr, wd) = (self.lr, self.weight_decay);
                    let bc1 = 1.0 - BETA1.powi(self.t as i32);
                    let bc2 = 1.0 - BETA2.powi(self.t as i32);
                    let w = slot.as_mut_slice();
                    let m = self.m[i].as_mut_slice();
                    let v = self.v[i].as_mut_slice();
                    for j in 0..w.len() {
                        let mut g = g.as_slice()[j];
                        if decoupled {
                            w[j] *= 1.0 - lr * wd;
                        } else {
                            g += wd * w[j];
                        }
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        w[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales the gradients in place so their joint Euclidean norm does not
/// exceed `max_norm`, returning the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|&g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= scale;
            }
        }
    }
    norm
}
