//! Minimal point-cloud classifier used to demonstrate the plug-and-play
//! improvement: lift coordinates to C channels, optionally refine with the
//! block, max-pool into a global embedding, classify with two fully
//! connected layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::batch_norm::{BatchStats, BnMode};
use crate::numerics::tape::{GradTape, PoolMode, TensorId};
use crate::numerics::tensor::Tensor;
use crate::pnp::block;
use crate::pnp::config::PnpConfig;
use crate::pnp::params::{PnpParamIds, PnpParams};
use crate::rng::Rng;
use crate::spatial::{NeighborIndex, PointCloud};

/// Classifier and optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Channel width C the coordinates are lifted to.
    pub lift_dim: usize,
    /// Insert the refinement block between lifting and pooling.
    pub use_pnp: bool,
    pub pnp: PnpConfig,
    pub classes: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed for weight init and batch shuffling.
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lift_dim: 32,
            use_pnp: true,
            pnp: PnpConfig::default(),
            classes: 4,
            learning_rate: 0.02,
            epochs: 6,
            batch_size: 16,
            seed: 1,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.lift_dim < 2 {
            return Err(Error::Config("lift dimension must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.use_pnp {
            self.pnp.validate()?;
            if self.pnp.channels != self.lift_dim {
                return Err(Error::Config(format!(
                    "block channels {} must equal lift dimension {}",
                    self.pnp.channels, self.lift_dim
                )));
            }
        }
        Ok(())
    }
}

/// Plain fully connected layer; carries a bias since no normalization
/// follows it.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Linear {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Tensor::random_uniform(&[in_dim, out_dim], -bound, bound, rng),
            bias: Tensor::random_uniform(&[out_dim], -bound, bound, rng),
        }
    }
}

/// All learnable state of the classifier.
///
/// The lift is a plain biased linear + ReLU rather than a normalized shared
/// MLP: normalizing per cloud standardizes every channel before the max
/// pool, which makes the pooled baseline embedding nearly shape-invariant
/// and untrainable. The refinement block keeps its normalized MLPs.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub lift: Linear,
    pub pnp: Option<PnpParams>,
    pub hidden: Linear,
    pub output: Linear,
}

/// Tape leaves for one registered forward pass.
pub struct ClassifierIds {
    pub lift_weight: TensorId,
    pub lift_bias: TensorId,
    pub pnp: Option<PnpParamIds>,
    pub hidden_weight: TensorId,
    pub hidden_bias: TensorId,
    pub output_weight: TensorId,
    pub output_bias: TensorId,
}

/// What one forward pass exposes.
pub struct ClassifierForward {
    /// `[classes]` logit vector.
    pub logits: TensorId,
    /// Lifted `[n x C]` features entering the block.
    pub before_block: TensorId,
    /// Refined `[n x C]` features, when the block is enabled.
    pub after_block: Option<TensorId>,
    /// Training-mode batch statistics from the block's three MLPs
    /// (empty when the block is disabled or in eval mode).
    pub bn_stats: Vec<BatchStats>,
}

impl ClassifierParams {
    pub fn init(cfg: &ClassifierConfig, rng: &mut Rng) -> Result<ClassifierParams> {
        cfg.validate()?;
        let c = cfg.lift_dim;
        Ok(ClassifierParams {
            lift: Linear::init(3, c, rng),
            pnp: if cfg.use_pnp {
                Some(PnpParams::init(&cfg.pnp, rng)?)
            } else {
                None
            },
            hidden: Linear::init(c, c / 2, rng),
            output: Linear::init(c / 2, cfg.classes, rng),
        })
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        if let Some(p) = &mut self.pnp {
            p.set_mode(mode);
        }
    }

    pub fn register(&self, tape: &mut GradTape) -> ClassifierIds {
        ClassifierIds {
            lift_weight: tape.var(self.lift.weight.clone()),
            lift_bias: tape.var(self.lift.bias.clone()),
            pnp: self.pnp.as_ref().map(|p| p.register(tape)),
            hidden_weight: tape.var(self.hidden.weight.clone()),
            hidden_bias: tape.var(self.hidden.bias.clone()),
            output_weight: tape.var(self.output.weight.clone()),
            output_bias: tape.var(self.output.bias.clone()),
        }
    }

    /// Learnable tensors in a fixed order shared with [`ClassifierIds::leaves`].
    pub fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.lift.weight, &mut self.lift.bias];
        if let Some(p) = &mut self.pnp {
            out.extend(p.leaves_mut());
        }
        out.push(&mut self.hidden.weight);
        out.push(&mut self.hidden.bias);
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    pub fn leaves(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.lift.weight, &self.lift.bias];
        if let Some(p) = &self.pnp {
            out.extend(p.leaves());
        }
        out.push(&self.hidden.weight);
        out.push(&self.hidden.bias);
        out.push(&self.output.weight);
        out.push(&self.output.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    /// Folds training-mode statistics back in the order
    /// [`ClassifierForward::bn_stats`] reports them.
    pub fn apply_bn_updates(&mut self, stats: &[BatchStats]) {
        if let Some(p) = &mut self.pnp {
            p.apply_bn_updates(stats);
        } else {
            debug_assert!(stats.is_empty());
        }
    }

    /// All tensors worth persisting, learnable and buffers alike.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("lift.weight".into(), &self.lift.weight),
            ("lift.bias".into(), &self.lift.bias),
        ];
        if let Some(p) = &self.pnp {
            for (name, t) in p.named_tensors() {
                out.push((format!("pnp.{name}"), t));
            }
        }
        out.push(("hidden.weight".into(), &self.hidden.weight));
        out.push(("hidden.bias".into(), &self.hidden.bias));
        out.push(("output.weight".into(), &self.output.weight));
        out.push(("output.bias".into(), &self.output.bias));
        out
    }

    /// Overwrites every named tensor from a checkpoint listing. The listing
    /// must cover exactly the tensors this model owns, shapes included.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut wanted: Vec<(String, &mut Tensor)> = vec![
            ("lift.weight".into(), &mut self.lift.weight),
            ("lift.bias".into(), &mut self.lift.bias),
        ];
        if let Some(p) = &mut self.pnp {
            for (name, t) in p.named_tensors_mut() {
                wanted.push((format!("pnp.{name}"), t));
            }
        }
        wanted.push(("hidden.weight".into(), &mut self.hidden.weight));
        wanted.push(("hidden.bias".into(), &mut self.hidden.bias));
        wanted.push(("output.weight".into(), &mut self.output.weight));
        wanted.push(("output.bias".into(), &mut self.output.bias));
        if entries.len() != wanted.len() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} tensors, model expects {}",
                entries.len(),
                wanted.len()
            )));
        }
        for (name, slot) in wanted {
            let found = entries
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint misses tensor {name}")))?;
            if found.1.shape() != slot.shape() {
                return Err(Error::Integrity(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    found.1.shape(),
                    slot.shape()
                )));
            }
            *slot = found.1.clone();
        }
        Ok(())
    }
}

/// Forward pass over one cloud. `idx` must be given when the block is
/// enabled (graphs are static per cloud, so callers precompute it once).
pub fn forward(
    tape: &mut GradTape,
    params: &ClassifierParams,
    ids: &ClassifierIds,
    cloud: &PointCloud,
    idx: Option<&NeighborIndex>,
    pnp_config: &PnpConfig,
) -> Result<ClassifierForward> {
    let coords = tape.var(cloud.coords().clone());
    let mut bn_stats = Vec::new();

    let lin = tape.matmul(coords, ids.lift_weight)?;
    let biased = tape.add_rows(lin, ids.lift_bias)?;
    let lifted = tape.relu(biased);

    let (refined, after_block) = match (&params.pnp, &ids.pnp) {
        (Some(pnp), Some(pnp_ids)) => {
            let idx = idx.ok_or_else(|| {
                Error::Param("a neighbor table is required when the block is enabled".into())
            })?;
            let fwd = block::forward(tape, pnp, pnp_ids, cloud, lifted, idx, pnp_config)?;
            bn_stats.extend(fwd.bn_stats);
            (fwd.output, Some(fwd.output))
        }
        _ => (lifted, None),
    };

    // Symmetric aggregation: global max over points.
    let pooled = tape.pool(refined, 0, PoolMode::Max)?;
    let embedding = {
        let c = tape.value(pooled).numel();
        tape.reshape(pooled, vec![1, c])?
    };
    let h = tape.matmul(embedding, ids.hidden_weight)?;
    let h = tape.add_rows(h, ids.hidden_bias)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, ids.output_weight)?;
    let o = tape.add_rows(o, ids.output_bias)?;
    let classes = tape.value(o).numel();
    let logits = tape.reshape(o, vec![classes])?;

    Ok(ClassifierForward {
        logits,
        before_block: lifted,
        after_block,
        bn_stats,
    })
}

impl ClassifierIds {
    /// Same order as [`ClassifierParams::leaves_mut`].
    pub fn leaves(&self) -> Vec<TensorId> {
        let mut out = vec![self.lift_weight, self.lift_bias];
        if let Some(p) = &self.pnp {
            out.extend(p.leaves());
        }
        out.push(self.hidden_weight);
        out.push(self.hidden_bias);
        out.push(self.output_weight);
        out.push(self.output_bias);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pnp::complexity::count_params;
    use crate::toy::dataset::{generate, DatasetSpec, ShapeClass};

    fn tiny_cfg(use_pnp: bool) -> ClassifierConfig {
        let mut cfg = ClassifierConfig::default();
        cfg.lift_dim = 8;
        cfg.use_pnp = use_pnp;
        cfg.pnp = PnpConfig::new(8, 4);
        cfg.pnp.reduction = 2;
        cfg
    }

    fn tiny_cloud(seed: u64) -> PointCloud {
        let spec = DatasetSpec {
            classes: vec![ShapeClass::Sphere],
            points_per_cloud: 32,
            noise_sigma: 0.05,
            seed,
            train_per_class: 1,
            test_per_class: 1,
        };
        generate(&spec).unwrap().train.remove(0).cloud
    }

    fn eval_forward(
        params: &ClassifierParams,
        cfg: &ClassifierConfig,
        cloud: &PointCloud,
    ) -> Vec<f64> {
        let idx = block::search_neighbors(cloud, &cfg.pnp).unwrap();
        let mut tape = GradTape::new();
        let ids = params.register(&mut tape);
        let fwd = forward(&mut tape, params, &ids, cloud, Some(&idx), &cfg.pnp).unwrap();
        tape.value(fwd.logits).data().to_vec()
    }

    #[test]
    fn logits_length_equals_class_count() {
        let cfg = tiny_cfg(true);
        let mut rng = Rng::new(4);
        let mut params = ClassifierParams::init(&cfg, &mut rng).unwrap();
        params.set_mode(BnMode::Eval);
        let logits = eval_forward(&params, &cfg, &tiny_cloud(5));
        assert_eq!(logits.len(), 4);
    }

    #[test]
    fn logits_are_permutation_invariant() {
        let cfg = tiny_cfg(true);
        let mut rng = Rng::new(6);
        let mut params = ClassifierParams::init(&cfg, &mut rng).unwrap();
        params.set_mode(BnMode::Eval);
        let cloud = tiny_cloud(9);
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        rng.shuffle(&mut perm);
        let permuted = cloud.permuted(&perm).unwrap();

        let a = eval_forward(&params, &cfg, &cloud);
        let b = eval_forward(&params, &cfg, &permuted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn logits_reproducible_bitwise_in_eval_mode() {
        let cfg = tiny_cfg(true);
        let mut rng = Rng::new(8);
        let mut params = ClassifierParams::init(&cfg, &mut rng).unwrap();
        params.set_mode(BnMode::Eval);
        let cloud = tiny_cloud(2);
        let a: Vec<u64> = eval_forward(&params, &cfg, &cloud)
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let b: Vec<u64> = eval_forward(&params, &cfg, &cloud)
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn enabling_the_block_adds_exactly_its_parameters() {
        let with = ClassifierParams::init(&tiny_cfg(true), &mut Rng::new(1)).unwrap();
        let without = ClassifierParams::init(&tiny_cfg(false), &mut Rng::new(1)).unwrap();
        let block_params = count_params(&tiny_cfg(true).pnp).unwrap().total;
        assert!(with.param_count() > without.param_count());
        assert_eq!(with.param_count() - without.param_count(), block_params);
    }

    #[test]
    fn rejects_mismatched_block_channels() {
        let mut cfg = tiny_cfg(true);
        cfg.pnp.channels = 16;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_names_round_trip() {
        let cfg = tiny_cfg(true);
        let params = ClassifierParams::init(&cfg, &mut Rng::new(3)).unwrap();
        let entries: Vec<(String, Tensor)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let mut other = ClassifierParams::init(&cfg, &mut Rng::new(99)).unwrap();
        other.load_named(&entries).unwrap();
        for ((_, a), (_, b)) in params.named_tensors().iter().zip(other.named_tensors().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn load_rejects_wrong_shapes() {
        let cfg = tiny_cfg(true);
        let params = ClassifierParams::init(&cfg, &mut Rng::new(3)).unwrap();
        let mut entries: Vec<(String, Tensor)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        entries[0].1 = Tensor::zeros(&[5, 5]);
        let mut other = ClassifierParams::init(&cfg, &mut Rng::new(99)).unwrap();
        assert!(matches!(
            other.load_named(&entries),
            Err(Error::Integrity(_))
        ));
    }
}
