//! Per-channel batch normalization state.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Whether a forward pass normalizes with batch statistics (and reports
/// running-stat updates) or with the frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Training,
    Eval,
}

/// Batch statistics observed by one training-mode forward pass.
///
/// The forward itself never mutates [`BatchNormState`]; the caller folds
/// these into the running statistics with [`BatchNormState::absorb`], in
/// whatever order keeps the run deterministic.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Learnable scale/shift plus running statistics for one channel axis.
///
/// Variance is the population (biased) variance both for normalization and
/// for the running estimate, so eval-mode output converges to the training
/// normalization as statistics settle.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

/// Convention defaults: the usual values for conv + BN stacks.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

impl BatchNormState {
    /// Identity-initialized state: gamma 1, beta 0, running mean 0, var 1.
    pub fn new(channels: usize) -> BatchNormState {
        BatchNormState {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: BnMode::Training,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn absorb(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    pub fn check_consistent(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.numel() != c {
                return Err(Error::Shape(format!(
                    "batch norm {name} has {} values, expected {c}",
                    t.numel()
                )));
            }
        }
        if self.running_var.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Integrity(
                "batch norm running_var must stay strictly positive".into(),
            ));
        }
        Ok(())
    }
}
