//! Whole-block gradient verification across the ablation grid.
//!
//! Every published variant (6 combine rules x 3 regularization ops x 2
//! descriptor poolings) gets its analytic backward compared against central
//! finite differences through the complete block, for the input features
//! and all eleven learnable tensors.

use rayon::prelude::*;

use crate::error::Result;
use crate::numerics::batch_norm::BnMode;
use crate::numerics::gradcheck::{finite_difference, relative_error, FD_STEP};
use crate::numerics::tape::{CombineRule, GradTape, PoolMode};
use crate::numerics::tensor::Tensor;
use crate::pnp::block;
use crate::pnp::config::{PnpConfig, RegularizationOp};
use crate::pnp::params::PnpParams;
use crate::rng::Rng;
use crate::spatial::PointCloud;

/// Probe dimensions for the reference suite: small enough to finite-
/// difference the whole block quickly, large enough to exercise every path.
pub const SUITE_POINTS: usize = 12;
pub const SUITE_CHANNELS: usize = 8;
pub const SUITE_NEIGHBORS: usize = 4;
pub const SUITE_REDUCTION: usize = 2;

/// One verified variant.
#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub pooling: PoolMode,
    pub regularization: RegularizationOp,
    pub combine: CombineRule,
    pub max_rel_error: f64,
}

impl VariantOutcome {
    pub fn label(&self) -> String {
        format!(
            "{:?}/{}/{}",
            self.pooling,
            self.regularization.name(),
            self.combine.name()
        )
    }
}

/// The full 36-point grid in a fixed order.
pub fn variant_grid() -> Vec<(PoolMode, RegularizationOp, CombineRule)> {
    let mut grid = Vec::with_capacity(36);
    for pooling in [PoolMode::Max, PoolMode::Avg] {
        for regularization in RegularizationOp::ALL {
            for combine in CombineRule::ALL {
                grid.push((pooling, regularization, combine));
            }
        }
    }
    grid
}

/// Suite config for one grid point.
pub fn suite_config(
    pooling: PoolMode,
    regularization: RegularizationOp,
    combine: CombineRule,
) -> PnpConfig {
    let mut config = PnpConfig::new(SUITE_CHANNELS, SUITE_NEIGHBORS);
    config.reduction = SUITE_REDUCTION;
    config.pooling = pooling;
    config.regularization = regularization;
    config.combine = combine;
    config
}

/// Compares the analytic whole-block backward against finite differences
/// on random data; returns the worst relative error across the features
/// and every learnable tensor (NaN if anything non-finite shows up).
pub fn check_block_gradients(
    config: &PnpConfig,
    n: usize,
    seed: u64,
    mode: BnMode,
) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let cloud = PointCloud::new(Tensor::from_fn(&[n, 3], |_| rng.uniform(-1.0, 1.0)))?;
    let mut params = PnpParams::init(config, &mut rng)?;
    for bn in [
        &mut params.geo_encoder.bn,
        &mut params.feat_encoder.bn,
        &mut params.expand.bn,
    ] {
        let c = bn.channels();
        bn.running_mean = Tensor::random_uniform(&[c], -0.3, 0.3, &mut rng);
        bn.running_var = Tensor::random_uniform(&[c], 0.5, 1.5, &mut rng);
    }
    params.set_mode(mode);

    let features = Tensor::from_fn(&[n, config.channels], |_| rng.uniform(-1.0, 1.0));
    let upstream = Tensor::from_fn(&[n, config.channels], |_| rng.uniform(-1.0, 1.0));
    let idx = block::search_neighbors(&cloud, config)?;

    // Analytic gradients.
    let mut tape = GradTape::new();
    let fid = tape.var(features.clone());
    let ids = params.register(&mut tape);
    let fwd = block::forward(&mut tape, &params, &ids, &cloud, fid, &idx, config)?;
    let grads = block::backward(&tape, fwd.output, fid, &ids, upstream.clone())?;

    let leaf_values: Vec<Tensor> = params.leaves().into_iter().cloned().collect();
    let loss = |feat: &Tensor, leaves: &[Tensor]| -> f64 {
        let probe = params.with_leaves(leaves);
        let mut tape = GradTape::new();
        let fid = tape.var(feat.clone());
        let ids = probe.register(&mut tape);
        let fwd = block::forward(&mut tape, &probe, &ids, &cloud, fid, &idx, config)
            .expect("probe forward");
        tape.value(fwd.output)
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(o, w)| o * w)
            .sum()
    };

    let mut worst = 0.0_f64;
    let mut fold = |err: f64, analytic_finite: bool| {
        if err.is_nan() || !analytic_finite {
            worst = f64::NAN;
        } else if !worst.is_nan() {
            worst = worst.max(err);
        }
    };

    let fd = finite_difference(|t| loss(t, &leaf_values), &features, FD_STEP);
    fold(
        relative_error(&grads.features, &fd),
        grads.features.all_finite(),
    );

    for slot in 0..leaf_values.len() {
        let fd = finite_difference(
            |t| {
                let mut leaves = leaf_values.clone();
                leaves[slot] = t.clone();
                loss(&features, &leaves)
            },
            &leaf_values[slot],
            FD_STEP,
        );
        fold(
            relative_error(&grads.params[slot], &fd),
            grads.params[slot].all_finite(),
        );
    }
    Ok(worst)
}

/// Runs the 36-variant suite (eval-mode statistics) at the reference probe
/// size. Variants execute in parallel; the report order is the grid order.
pub fn run_variant_suite(seed: u64) -> Result<Vec<VariantOutcome>> {
    variant_grid()
        .into_par_iter()
        .enumerate()
        .map(|(i, (pooling, regularization, combine))| {
            let config = suite_config(pooling, regularization, combine);
            let err = check_block_gradients(
                &config,
                SUITE_POINTS,
                seed.wrapping_add(i as u64),
                BnMode::Eval,
            )?;
            Ok(VariantOutcome {
                pooling,
                regularization,
                combine,
                max_rel_error: err,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::FD_TOLERANCE;

    #[test]
    fn grid_covers_all_36_variants() {
        let grid = variant_grid();
        assert_eq!(grid.len(), 36);
        let mut labels: Vec<String> = grid
            .iter()
            .map(|(p, r, c)| format!("{p:?}/{}/{}", r.name(), c.name()))
            .collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 36);
    }

    #[test]
    fn default_variant_passes_eval_gradcheck() {
        let config = suite_config(
            PoolMode::Avg,
            RegularizationOp::Subtract,
            CombineRule::GeometricMean,
        );
        let err = check_block_gradients(&config, SUITE_POINTS, 42, BnMode::Eval).unwrap();
        assert!(err < FD_TOLERANCE, "relative error {err}");
    }

    #[test]
    fn default_variant_passes_training_mode_gradcheck() {
        // Training-mode statistics couple every point through the batch
        // moments; the analytic backward must carry those terms too.
        let config = suite_config(
            PoolMode::Avg,
            RegularizationOp::Subtract,
            CombineRule::GeometricMean,
        );
        let err = check_block_gradients(&config, SUITE_POINTS, 43, BnMode::Training).unwrap();
        assert!(err < FD_TOLERANCE, "relative error {err}");
    }

    #[test]
    fn one_max_pool_variant_passes() {
        let config = suite_config(
            PoolMode::Max,
            RegularizationOp::Product,
            CombineRule::HarmonicMean,
        );
        let err = check_block_gradients(&config, SUITE_POINTS, 44, BnMode::Eval).unwrap();
        assert!(err < FD_TOLERANCE, "relative error {err}");
    }
}
