//! Learning-rate schedules.

use std::f64::consts::PI;

use crate::error::{AliseError, Result};

/// Cosine annealing with warm restarts; cycle `i` lasts `t0 · 2^i` epochs and `lr_min = 0`.
///
/// `epoch` may be fractional to anneal within an epoch.
pub fn cosine_warm_restarts(epoch: f64, t0: usize, lr_max: f64) -> Result<f64> {
    if t0 == 0 {
        return Err(AliseError::Config("T0 must be at least 1".into()));
    }
    if !(epoch >= 0.0) {
        return Err(AliseError::Config(format!("epoch must be non-negative, got {epoch}")));
    }
    let mut start = 0.0;
    let mut len = t0 as f64;
    while epoch >= start + len {
        start += len;
        len *= 2.0;
    }
    Ok(0.5 * lr_max * (1.0 + (PI * (epoch - start) / len).cos()))
}

/// Multiplies the rate by `decay` after `patience` rounds without improvement (lower is better).
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub patience: usize,
    pub decay: f64,
    best: f64,
    bad_rounds: usize,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize, decay: f64) -> Result<Self> {
        if patience == 0 {
            return Err(AliseError::Config("plateau patience must be at least 1".into()));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(AliseError::Config(format!("plateau decay must lie in (0, 1), got {decay}")));
        }
        Ok(Self { lr, patience, decay, best: f64::INFINITY, bad_rounds: 0 })
    }

    /// Records one validation value and returns the rate for the next round.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.bad_rounds = 0;
        } else {
            self.bad_rounds += 1;
            if self.bad_rounds > self.patience {
                self.lr *= self.decay;
                self.bad_rounds = 0;
            }
        }
        self.lr
    }
}
