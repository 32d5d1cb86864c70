//! Learnable state of one refinement block.

use crate::error::Result;
use crate::numerics::batch_norm::{BatchStats, BnMode};
use crate::numerics::shared_mlp::{SharedMlp, SharedMlpIds};
use crate::numerics::tape::{GradTape, TensorId};
use crate::numerics::tensor::Tensor;
use crate::pnp::config::PnpConfig;
use crate::rng::Rng;

/// All weights of one block: two graph encoders, two low-rank projections,
/// and the expansion MLP that restores the channel width.
#[derive(Clone, Debug)]
pub struct PnpParams {
    /// Encodes the `[n x k x 6]` geometric graph into C/2 channels.
    pub geo_encoder: SharedMlp,
    /// Encodes the `[n x k x 2C]` feature graph into C/2 channels.
    pub feat_encoder: SharedMlp,
    /// `[C x C/r]` projection feeding the channel descriptor.
    pub channel_proj: Tensor,
    /// `[C x C/r]` projection feeding the point descriptor.
    pub point_proj: Tensor,
    /// Restores `[.. x C/r]` back to C channels.
    pub expand: SharedMlp,
}

/// Tape leaves of a registered [`PnpParams`], one forward pass worth.
#[derive(Clone, Copy, Debug)]
pub struct PnpParamIds {
    pub geo: SharedMlpIds,
    pub feat: SharedMlpIds,
    pub channel_proj: TensorId,
    pub point_proj: TensorId,
    pub expand: SharedMlpIds,
}

/// Canonical order of the learnable tensors; gradients, optimizer state and
/// checkpoints all follow it.
pub const LEAF_NAMES: [&str; 11] = [
    "geo_encoder.weight",
    "geo_encoder.bn.gamma",
    "geo_encoder.bn.beta",
    "feat_encoder.weight",
    "feat_encoder.bn.gamma",
    "feat_encoder.bn.beta",
    "channel_proj",
    "point_proj",
    "expand.weight",
    "expand.bn.gamma",
    "expand.bn.beta",
];

impl PnpParams {
    pub fn init(config: &PnpConfig, rng: &mut Rng) -> Result<PnpParams> {
        config.validate()?;
        let c = config.channels;
        let reduced = config.reduced();
        let proj_bound = 1.0 / (c as f64).sqrt();
        Ok(PnpParams {
            geo_encoder: SharedMlp::init(6, c / 2, rng),
            feat_encoder: SharedMlp::init(2 * c, c / 2, rng),
            channel_proj: Tensor::random_uniform(&[c, reduced], -proj_bound, proj_bound, rng),
            point_proj: Tensor::random_uniform(&[c, reduced], -proj_bound, proj_bound, rng),
            expand: SharedMlp::init(reduced, c, rng),
        })
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.geo_encoder.set_mode(mode);
        self.feat_encoder.set_mode(mode);
        self.expand.set_mode(mode);
    }

    pub fn register(&self, tape: &mut GradTape) -> PnpParamIds {
        PnpParamIds {
            geo: self.geo_encoder.register(tape),
            feat: self.feat_encoder.register(tape),
            channel_proj: tape.var(self.channel_proj.clone()),
            point_proj: tape.var(self.point_proj.clone()),
            expand: self.expand.register(tape),
        }
    }

    /// Learnable tensors in canonical order (see [`LEAF_NAMES`]).
    pub fn leaves(&self) -> Vec<&Tensor> {
        vec![
            &self.geo_encoder.weight,
            &self.geo_encoder.bn.gamma,
            &self.geo_encoder.bn.beta,
            &self.feat_encoder.weight,
            &self.feat_encoder.bn.gamma,
            &self.feat_encoder.bn.beta,
            &self.channel_proj,
            &self.point_proj,
            &self.expand.weight,
            &self.expand.bn.gamma,
            &self.expand.bn.beta,
        ]
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.geo_encoder.weight,
            &mut self.geo_encoder.bn.gamma,
            &mut self.geo_encoder.bn.beta,
            &mut self.feat_encoder.weight,
            &mut self.feat_encoder.bn.gamma,
            &mut self.feat_encoder.bn.beta,
            &mut self.channel_proj,
            &mut self.point_proj,
            &mut self.expand.weight,
            &mut self.expand.bn.gamma,
            &mut self.expand.bn.beta,
        ]
    }

    /// Copy of `self` with the learnable tensors replaced in canonical
    /// order; batch-norm buffers and modes are kept. Used by probing code
    /// that re-evaluates the block as a pure function of its leaves.
    pub fn with_leaves(&self, leaves: &[Tensor]) -> PnpParams {
        assert_eq!(leaves.len(), LEAF_NAMES.len());
        let mut out = self.clone();
        for (slot, value) in out.leaves_mut().into_iter().zip(leaves) {
            *slot = value.clone();
        }
        out
    }

    /// Total learnable parameter count by enumeration.
    pub fn param_count(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    /// Folds training-mode batch statistics into the running estimates, in
    /// the same order the forward pass reported them.
    pub fn apply_bn_updates(&mut self, stats: &[BatchStats]) {
        debug_assert_eq!(stats.len(), 3, "geo, feat, expand");
        self.geo_encoder.bn.absorb(&stats[0]);
        self.feat_encoder.bn.absorb(&stats[1]);
        self.expand.bn.absorb(&stats[2]);
    }

    /// Every tensor worth checkpointing: learnable leaves plus batch-norm
    /// running statistics, under stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = LEAF_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(self.leaves())
            .collect();
        out.push((
            "geo_encoder.bn.running_mean".into(),
            &self.geo_encoder.bn.running_mean,
        ));
        out.push((
            "geo_encoder.bn.running_var".into(),
            &self.geo_encoder.bn.running_var,
        ));
        out.push((
            "feat_encoder.bn.running_mean".into(),
            &self.feat_encoder.bn.running_mean,
        ));
        out.push((
            "feat_encoder.bn.running_var".into(),
            &self.feat_encoder.bn.running_var,
        ));
        out.push(("expand.bn.running_mean".into(), &self.expand.bn.running_mean));
        out.push(("expand.bn.running_var".into(), &self.expand.bn.running_var));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("geo_encoder.weight".into(), &mut self.geo_encoder.weight),
            ("geo_encoder.bn.gamma".into(), &mut self.geo_encoder.bn.gamma),
            ("geo_encoder.bn.beta".into(), &mut self.geo_encoder.bn.beta),
            ("feat_encoder.weight".into(), &mut self.feat_encoder.weight),
            ("feat_encoder.bn.gamma".into(), &mut self.feat_encoder.bn.gamma),
            ("feat_encoder.bn.beta".into(), &mut self.feat_encoder.bn.beta),
            ("channel_proj".into(), &mut self.channel_proj),
            ("point_proj".into(), &mut self.point_proj),
            ("expand.weight".into(), &mut self.expand.weight),
            ("expand.bn.gamma".into(), &mut self.expand.bn.gamma),
            ("expand.bn.beta".into(), &mut self.expand.bn.beta),
            (
                "geo_encoder.bn.running_mean".into(),
                &mut self.geo_encoder.bn.running_mean,
            ),
            (
                "geo_encoder.bn.running_var".into(),
                &mut self.geo_encoder.bn.running_var,
            ),
            (
                "feat_encoder.bn.running_mean".into(),
                &mut self.feat_encoder.bn.running_mean,
            ),
            (
                "feat_encoder.bn.running_var".into(),
                &mut self.feat_encoder.bn.running_var,
            ),
            (
                "expand.bn.running_mean".into(),
                &mut self.expand.bn.running_mean,
            ),
            (
                "expand.bn.running_var".into(),
                &mut self.expand.bn.running_var,
            ),
        ]
    }
}

impl PnpParamIds {
    /// Tape ids in the same canonical order as [`PnpParams::leaves`].
    pub fn leaves(&self) -> Vec<TensorId> {
        vec![
            self.geo.weight,
            self.geo.gamma,
            self.geo.beta,
            self.feat.weight,
            self.feat.gamma,
            self.feat.beta,
            self.channel_proj,
            self.point_proj,
            self.expand.weight,
            self.expand.gamma,
            self.expand.beta,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_orders_agree() {
        let cfg = PnpConfig::new(8, 4);
        let params = PnpParams::init(&cfg, &mut Rng::new(1)).unwrap();
        let mut tape = GradTape::new();
        let ids = params.register(&mut tape);
        let id_list = ids.leaves();
        let leaf_list = params.leaves();
        assert_eq!(id_list.len(), LEAF_NAMES.len());
        for (id, leaf) in id_list.iter().zip(leaf_list) {
            assert_eq!(tape.value(*id).shape(), leaf.shape());
            assert_eq!(tape.value(*id).data(), leaf.data());
        }
    }

    #[test]
    fn with_leaves_replaces_in_order() {
        let mut cfg = PnpConfig::new(4, 2);
        cfg.reduction = 2;
        let params = PnpParams::init(&cfg, &mut Rng::new(2)).unwrap();
        let replacement: Vec<Tensor> = params
            .leaves()
            .iter()
            .map(|t| Tensor::filled(t.shape(), 0.25))
            .collect();
        let rebuilt = params.with_leaves(&replacement);
        for leaf in rebuilt.leaves() {
            assert!(leaf.data().iter().all(|&v| v == 0.25));
        }
        // buffers untouched
        assert_eq!(
            rebuilt.expand.bn.running_var.data(),
            params.expand.bn.running_var.data()
        );
    }

    #[test]
    fn shapes_follow_config() {
        let mut cfg = PnpConfig::new(16, 8);
        cfg.reduction = 4;
        let params = PnpParams::init(&cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(params.geo_encoder.weight.shape(), &[6, 8]);
        assert_eq!(params.feat_encoder.weight.shape(), &[32, 8]);
        assert_eq!(params.channel_proj.shape(), &[16, 4]);
        assert_eq!(params.point_proj.shape(), &[16, 4]);
        assert_eq!(params.expand.weight.shape(), &[4, 16]);
    }
}
