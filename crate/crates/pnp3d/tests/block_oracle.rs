//! Whole-block forward agreement against the scripted per-equation oracle.

mod common;

use common::{max_abs_diff, random_cloud, random_features, random_params, rows_to_tensor};
use pnp3d::numerics::batch_norm::BnMode;
use pnp3d::pnp::{block, PnpConfig};
use pnp3d::rng::Rng;
use pnp3d::spatial::knn_search;
use pnp3d::GradTape;

fn run_block(
    params: &pnp3d::PnpParams,
    config: &PnpConfig,
    cloud: &pnp3d::PointCloud,
    features: &[Vec<f64>],
    idx: &pnp3d::NeighborIndex,
) -> pnp3d::Tensor {
    let mut tape = GradTape::new();
    let fid = tape.var(rows_to_tensor(features));
    let ids = params.register(&mut tape);
    let fwd = block::forward(&mut tape, params, &ids, cloud, fid, idx, config).unwrap();
    tape.value(fwd.output).clone()
}

#[test]
fn eight_point_forward_matches_scripted_equations() {
    let mut config = PnpConfig::new(4, 2);
    config.reduction = 2;
    let mut rng = Rng::new(2021);
    let cloud = random_cloud(8, &mut rng);
    let features = random_features(8, 4, &mut rng);
    let idx = knn_search(&cloud, 2).unwrap();

    for mode in [BnMode::Eval, BnMode::Training] {
        let params = random_params(&config, mode, &mut rng);
        let out = run_block(&params, &config, &cloud, &features, &idx);
        let scripted =
            common::scripted_block_forward(&params, &config, &cloud, &features, &idx);
        let diff = max_abs_diff(&scripted, &out);
        assert!(diff < 1e-12, "{mode:?}: max deviation {diff}");
    }
}

#[test]
fn single_point_cloud_agrees_with_oracle() {
    let mut config = PnpConfig::new(8, 4);
    config.reduction = 4;
    let mut rng = Rng::new(5);
    let cloud = random_cloud(1, &mut rng);
    let features = random_features(1, 8, &mut rng);
    let idx = knn_search(&cloud, 4).unwrap();
    assert_eq!(idx.row(0), &[0, 0, 0, 0]);

    let params = random_params(&config, BnMode::Eval, &mut rng);
    let out = run_block(&params, &config, &cloud, &features, &idx);
    let scripted = common::scripted_block_forward(&params, &config, &cloud, &features, &idx);
    assert!(max_abs_diff(&scripted, &out) < 1e-12);
}

#[test]
fn activation_free_expansion_agrees_with_oracle() {
    // The switch that drops the rectifier at the end of the expansion MLP.
    let mut config = PnpConfig::new(8, 3);
    config.reduction = 2;
    config.expand_activation = pnp3d::MlpActivation::None;
    let mut rng = Rng::new(8);
    let cloud = random_cloud(10, &mut rng);
    let features = random_features(10, 8, &mut rng);
    let idx = knn_search(&cloud, 3).unwrap();

    let params = random_params(&config, BnMode::Training, &mut rng);
    let out = run_block(&params, &config, &cloud, &features, &idx);
    let scripted = common::scripted_block_forward(&params, &config, &cloud, &features, &idx);
    assert!(max_abs_diff(&scripted, &out) < 1e-12);

    // Dropping the rectifier must actually change the output.
    let mut relu_config = config;
    relu_config.expand_activation = pnp3d::MlpActivation::Relu;
    let with_relu = run_block(&params, &relu_config, &cloud, &features, &idx);
    assert_ne!(out.data(), with_relu.data());
}

#[test]
fn ball_query_neighborhoods_agree_with_oracle() {
    let mut config = PnpConfig::new(8, 4);
    config.reduction = 2;
    config.neighbor_mode = pnp3d::SearchMode::Ball { radius: 0.6 };
    let mut rng = Rng::new(6);
    let cloud = random_cloud(12, &mut rng);
    let features = random_features(12, 8, &mut rng);
    let idx = block::search_neighbors(&cloud, &config).unwrap();

    let params = random_params(&config, BnMode::Eval, &mut rng);
    let out = run_block(&params, &config, &cloud, &features, &idx);
    let scripted = common::scripted_block_forward(&params, &config, &cloud, &features, &idx);
    assert!(max_abs_diff(&scripted, &out) < 1e-12);
}
