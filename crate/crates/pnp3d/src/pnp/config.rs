//! Structural hyperparameters of one refinement block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::shared_mlp::MlpActivation;
use crate::numerics::tape::{CombineRule, PoolMode};
use crate::spatial::SearchMode;

/// How the local context map and the global perception map are combined
/// before the final activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationOp {
    Product,
    Sum,
    Subtract,
}

impl RegularizationOp {
    pub const ALL: [RegularizationOp; 3] = [
        RegularizationOp::Product,
        RegularizationOp::Sum,
        RegularizationOp::Subtract,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegularizationOp::Product => "product",
            RegularizationOp::Sum => "sum",
            RegularizationOp::Subtract => "subtract",
        }
    }
}

/// Block hyperparameters. Defaults are the published final model: reduction
/// 8, average descriptor pooling, subtractive regularization, geometric
/// mean combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PnpConfig {
    /// Feature width C; must be even and divisible by `reduction`.
    pub channels: usize,
    /// Neighborhood size k.
    pub neighbors: usize,
    /// Channel compression divisor r for the global block; at least 2.
    pub reduction: usize,
    /// Pooling that squeezes the global descriptors.
    pub pooling: PoolMode,
    /// Combiner applied between local and global maps.
    pub regularization: RegularizationOp,
    /// Elementwise rule forming the bilinear response.
    pub combine: CombineRule,
    /// Neighborhood collection strategy.
    pub neighbor_mode: SearchMode,
    /// Halve k before searching (memory-saving segmentation preset).
    pub half_k: bool,
    /// Activation ending the expansion MLP, ahead of the final combiner.
    pub expand_activation: MlpActivation,
}

impl Default for PnpConfig {
    fn default() -> Self {
        PnpConfig {
            channels: 32,
            neighbors: 16,
            reduction: 8,
            pooling: PoolMode::Avg,
            regularization: RegularizationOp::Subtract,
            combine: CombineRule::GeometricMean,
            neighbor_mode: SearchMode::Knn,
            half_k: false,
            expand_activation: MlpActivation::Relu,
        }
    }
}

impl PnpConfig {
    pub fn new(channels: usize, neighbors: usize) -> PnpConfig {
        PnpConfig {
            channels,
            neighbors,
            ..PnpConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "channels must be even and positive, got {}",
                self.channels
            )));
        }
        if self.reduction < 2 {
            return Err(Error::Config(format!(
                "reduction factor must be at least 2, got {}",
                self.reduction
            )));
        }
        if self.channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "reduction {} must divide channels {}",
                self.reduction, self.channels
            )));
        }
        if self.neighbors < 1 {
            return Err(Error::Config("neighbor count must be at least 1".into()));
        }
        if let SearchMode::Ball { radius } = self.neighbor_mode {
            if !(radius > 0.0) {
                return Err(Error::Config(format!(
                    "ball query radius must be positive, got {radius}"
                )));
            }
        }
        Ok(())
    }

    /// Compressed channel count C/r.
    pub fn reduced(&self) -> usize {
        self.channels / self.reduction
    }

    /// Neighbor count actually searched, honoring the half-k flag.
    pub fn effective_neighbors(&self) -> usize {
        if self.half_k {
            (self.neighbors / 2).max(1)
        } else {
            self.neighbors
        }
    }
}
