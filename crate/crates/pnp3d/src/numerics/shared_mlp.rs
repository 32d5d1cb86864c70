//! Shared per-position MLP: linear map + batch norm + optional ReLU.
//!
//! The linear map carries no bias; the batch-norm shift immediately after
//! it would make one redundant. Positions are flattened into the batch
//! axis, so the same normalization statistics cover every position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::batch_norm::{BatchNormState, BatchStats, BnMode};
use crate::numerics::tape::{GradTape, TensorId};
use crate::numerics::tensor::Tensor;
use crate::rng::Rng;

/// Post-linear activation choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpActivation {
    Relu,
    None,
}

/// Weights of one shared MLP layer.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    /// `[in_dim x out_dim]`, applied to every position independently.
    pub weight: Tensor,
    pub bn: BatchNormState,
}

/// Tape leaves for one registered [`SharedMlp`].
#[derive(Clone, Copy, Debug)]
pub struct SharedMlpIds {
    pub weight: TensorId,
    pub gamma: TensorId,
    pub beta: TensorId,
}

impl SharedMlp {
    /// Uniform He-style init in +-1/sqrt(in_dim), identity batch norm.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> SharedMlp {
        let bound = 1.0 / (in_dim as f64).sqrt();
        SharedMlp {
            weight: Tensor::random_uniform(&[in_dim, out_dim], -bound, bound, rng),
            bn: BatchNormState::new(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.bn.mode = mode;
    }

    /// Learnable tensor count (weight + bn gamma/beta).
    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bn.gamma.numel() + self.bn.beta.numel()
    }

    /// Puts the learnable tensors on a tape for one forward pass.
    pub fn register(&self, tape: &mut GradTape) -> SharedMlpIds {
        SharedMlpIds {
            weight: tape.var(self.weight.clone()),
            gamma: tape.var(self.bn.gamma.clone()),
            beta: tape.var(self.bn.beta.clone()),
        }
    }

    /// Applies the layer to a `[... x in_dim]` tensor, flattening all
    /// leading axes into the batch axis for normalization.
    pub fn apply(
        &self,
        tape: &mut GradTape,
        ids: SharedMlpIds,
        x: TensorId,
        activation: MlpActivation,
    ) -> Result<(TensorId, Option<BatchStats>)> {
        let shape = tape.value(x).shape().to_vec();
        let in_dim = self.in_dim();
        if shape.last() != Some(&in_dim) {
            return Err(Error::Shape(format!(
                "shared mlp expects last axis {in_dim}, got {shape:?}"
            )));
        }
        let positions: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, vec![positions, in_dim])?;
        let lin = tape.matmul(flat, ids.weight)?;
        let (normed, stats) = tape.batch_norm(lin, ids.gamma, ids.beta, &self.bn)?;
        let activated = match activation {
            MlpActivation::Relu => tape.relu(normed),
            MlpActivation::None => normed,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim();
        let out = tape.reshape(activated, out_shape)?;
        Ok((out, stats))
    }
}
