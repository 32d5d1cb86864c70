//! Shared helpers for integration tests, most importantly a step-by-step
//! scripted evaluation of the block that never touches the gradient tape:
//! plain nested loops over `Vec<f64>`, one stage per published equation.

#![allow(dead_code)]

use pnp3d::numerics::batch_norm::{BatchNormState, BnMode};
use pnp3d::numerics::shared_mlp::MlpActivation;
use pnp3d::numerics::tape::{CombineRule, PoolMode};
use pnp3d::pnp::config::{PnpConfig, RegularizationOp};
use pnp3d::pnp::params::PnpParams;
use pnp3d::rng::Rng;
use pnp3d::spatial::{NeighborIndex, PointCloud};
use pnp3d::Tensor;

pub fn random_cloud(n: usize, rng: &mut Rng) -> PointCloud {
    PointCloud::new(Tensor::from_fn(&[n, 3], |_| rng.uniform(-1.0, 1.0))).unwrap()
}

pub fn random_features(n: usize, c: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect()
}

pub fn rows_to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let n = rows.len();
    let c = rows[0].len();
    Tensor::new(vec![n, c], rows.iter().flatten().copied().collect()).unwrap()
}

/// Random parameters with non-trivial batch-norm state in the given mode.
pub fn random_params(config: &PnpConfig, mode: BnMode, rng: &mut Rng) -> PnpParams {
    let mut params = PnpParams::init(config, rng).unwrap();
    for bn in [
        &mut params.geo_encoder.bn,
        &mut params.feat_encoder.bn,
        &mut params.expand.bn,
    ] {
        let c = bn.channels();
        bn.gamma = Tensor::from_fn(&[c], |_| rng.uniform(0.5, 1.5));
        bn.beta = Tensor::from_fn(&[c], |_| rng.uniform(-0.5, 0.5));
        bn.running_mean = Tensor::from_fn(&[c], |_| rng.uniform(-0.3, 0.3));
        bn.running_var = Tensor::from_fn(&[c], |_| rng.uniform(0.5, 1.5));
    }
    params.set_mode(mode);
    params
}

// ---- scripted numerics, independent of the tape ----

fn linear(rows: &[Vec<f64>], weight: &Tensor) -> Vec<Vec<f64>> {
    let (din, dout) = (weight.shape()[0], weight.shape()[1]);
    rows.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout)
                .map(|j| (0..din).map(|t| row[t] * weight.data()[t * dout + j]).sum())
                .collect()
        })
        .collect()
}

fn batch_norm(rows: &[Vec<f64>], bn: &BatchNormState) -> Vec<Vec<f64>> {
    let c = rows[0].len();
    let m = rows.len() as f64;
    let (mean, var): (Vec<f64>, Vec<f64>) = match bn.mode {
        BnMode::Training => {
            let mean: Vec<f64> = (0..c)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m)
                .collect();
            let var: Vec<f64> = (0..c)
                .map(|j| {
                    rows.iter()
                        .map(|r| (r[j] - mean[j]) * (r[j] - mean[j]))
                        .sum::<f64>()
                        / m
                })
                .collect();
            (mean, var)
        }
        BnMode::Eval => (
            bn.running_mean.data().to_vec(),
            bn.running_var.data().to_vec(),
        ),
    };
    rows.iter()
        .map(|r| {
            (0..c)
                .map(|j| {
                    bn.gamma.data()[j] * (r[j] - mean[j]) / (var[j] + bn.eps).sqrt()
                        + bn.beta.data()[j]
                })
                .collect()
        })
        .collect()
}

fn relu_rows(rows: &mut [Vec<f64>]) {
    for r in rows.iter_mut() {
        for v in r.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

fn scripted_mish(x: f64) -> f64 {
    let sp = if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        (1.0 + x.exp()).ln()
    };
    x * sp.tanh()
}

fn combine(rule: CombineRule, lam: f64, mu: f64) -> f64 {
    match rule {
        CombineRule::Sum => lam + mu,
        CombineRule::Product => lam * mu,
        CombineRule::GrandMean => (lam + mu) / 2.0,
        CombineRule::QuadraticMean => (lam * lam + mu * mu).sqrt(),
        CombineRule::HarmonicMean => 2.0 * lam * mu / (lam + mu + 1e-12),
        CombineRule::GeometricMean => (lam * mu).sqrt(),
    }
}

/// Shared MLP stage: per-position linear (no bias), batch norm over all
/// positions, ReLU.
fn scripted_mlp(
    positions: &[Vec<f64>],
    weight: &Tensor,
    bn: &BatchNormState,
    relu: bool,
) -> Vec<Vec<f64>> {
    let mut out = batch_norm(&linear(positions, weight), bn);
    if relu {
        relu_rows(&mut out);
    }
    out
}

/// Step-by-step evaluation of the whole block: geometric and feature
/// graphs, their encoders with max aggregation, concatenation, the two
/// rectified descriptor paths with their pooling, the elementwise bilinear
/// combination, the expansion with both raw shortcut products, the chosen
/// regularization, and the final mish.
pub fn scripted_block_forward(
    params: &PnpParams,
    config: &PnpConfig,
    cloud: &PointCloud,
    features: &[Vec<f64>],
    idx: &NeighborIndex,
) -> Vec<Vec<f64>> {
    let n = cloud.len();
    let k = idx.k();
    let c = config.channels;
    let half = c / 2;
    let reduced = c / config.reduction;

    // local geometric graph -> encoder -> max over neighbors
    let mut geo_slots: Vec<Vec<f64>> = Vec::with_capacity(n * k);
    for i in 0..n {
        let p = cloud.point(i);
        for &nbr in idx.row(i) {
            let q = cloud.point(nbr);
            geo_slots.push(vec![
                p[0],
                p[1],
                p[2],
                q[0] - p[0],
                q[1] - p[1],
                q[2] - p[2],
            ]);
        }
    }
    let geo_encoded = scripted_mlp(
        &geo_slots,
        &params.geo_encoder.weight,
        &params.geo_encoder.bn,
        true,
    );
    let geo_context: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..half)
                .map(|j| {
                    (0..k)
                        .map(|s| geo_encoded[i * k + s][j])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        })
        .collect();

    // local feature graph -> encoder -> max over neighbors
    let mut feat_slots: Vec<Vec<f64>> = Vec::with_capacity(n * k);
    for i in 0..n {
        for &nbr in idx.row(i) {
            let mut slot = features[i].clone();
            slot.extend((0..c).map(|t| features[nbr][t] - features[i][t]));
            feat_slots.push(slot);
        }
    }
    let feat_encoded = scripted_mlp(
        &feat_slots,
        &params.feat_encoder.weight,
        &params.feat_encoder.bn,
        true,
    );
    let feat_context: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..half)
                .map(|j| {
                    (0..k)
                        .map(|s| feat_encoded[i * k + s][j])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        })
        .collect();

    // fused local context, geometric half first
    let local: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = geo_context[i].clone();
            row.extend_from_slice(&feat_context[i]);
            row
        })
        .collect();

    // descriptor paths: raw projections, rectified copies, pooled
    let channel_raw = linear(&local, &params.channel_proj);
    let point_raw = linear(&local, &params.point_proj);
    let mut channel_act = channel_raw.clone();
    relu_rows(&mut channel_act);
    let mut point_act = point_raw.clone();
    relu_rows(&mut point_act);

    let pool_column = |rows: &[Vec<f64>], j: usize| -> f64 {
        match config.pooling {
            PoolMode::Avg => rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64,
            PoolMode::Max => rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max),
        }
    };
    let channel_desc: Vec<f64> = (0..reduced).map(|j| pool_column(&channel_act, j)).collect();
    let point_desc: Vec<f64> = point_act
        .iter()
        .map(|row| match config.pooling {
            PoolMode::Avg => row.iter().sum::<f64>() / row.len() as f64,
            PoolMode::Max => row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();

    // bilinear response plus both raw shortcuts, expanded back to C
    let summed: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..reduced)
                .map(|j| {
                    combine(config.combine, point_desc[i], channel_desc[j])
                        + channel_raw[i][j]
                        + point_raw[i][j]
                })
                .collect()
        })
        .collect();
    let global = scripted_mlp(
        &summed,
        &params.expand.weight,
        &params.expand.bn,
        config.expand_activation == MlpActivation::Relu,
    );

    // regularize and activate
    (0..n)
        .map(|i| {
            (0..c)
                .map(|j| {
                    let combined = match config.regularization {
                        RegularizationOp::Subtract => local[i][j] - global[i][j],
                        RegularizationOp::Sum => local[i][j] + global[i][j],
                        RegularizationOp::Product => local[i][j] * global[i][j],
                    };
                    scripted_mish(combined)
                })
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
    let c = a[0].len();
    let mut worst = 0.0_f64;
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((v - b.data()[i * c + j]).abs());
        }
    }
    worst
}
