//! Analytic parameter and multiply-add accounting for one block.
//!
//! Two independent routes must agree exactly: the closed-form expressions
//! here, and enumeration over instantiated tensors (parameters) or the
//! instrumented tape counter fed by a real forward pass (multiply-adds).

use crate::error::Result;
use crate::numerics::batch_norm::BnMode;
use crate::numerics::shared_mlp::MlpActivation;
use crate::numerics::tape::{cost, GradTape};
use crate::numerics::tensor::Tensor;
use crate::pnp::block;
use crate::pnp::config::PnpConfig;
use crate::pnp::params::PnpParams;
use crate::rng::Rng;
use crate::spatial::PointCloud;

/// Per-tensor parameter counts plus their total.
#[derive(Clone, Debug)]
pub struct ParamCount {
    pub per_tensor: Vec<(&'static str, usize)>,
    pub total: usize,
}

/// Per-stage multiply-add counts plus their total.
#[derive(Clone, Debug)]
pub struct FlopCount {
    pub per_stage: Vec<(&'static str, u64)>,
    pub total: u64,
}

/// Closed-form learnable parameter count: every linear map has no bias
/// (batch-norm shift covers it), every batch norm contributes scale + shift.
pub fn count_params(config: &PnpConfig) -> Result<ParamCount> {
    config.validate()?;
    let c = config.channels;
    let r = config.reduced();
    let half = c / 2;
    let per_tensor = vec![
        ("geo_encoder.weight", 6 * half),
        ("geo_encoder.bn.gamma", half),
        ("geo_encoder.bn.beta", half),
        ("feat_encoder.weight", 2 * c * half),
        ("feat_encoder.bn.gamma", half),
        ("feat_encoder.bn.beta", half),
        ("channel_proj", c * r),
        ("point_proj", c * r),
        ("expand.weight", r * c),
        ("expand.bn.gamma", c),
        ("expand.bn.beta", c),
    ];
    let total = per_tensor.iter().map(|&(_, n)| n).sum();
    Ok(ParamCount { per_tensor, total })
}

/// Closed-form multiply-add count of one forward pass over n points,
/// mirroring exactly what the tape instruments (matrix products charge
/// M*K*P; other primitives charge the per-element costs in
/// [`crate::numerics::tape::cost`]). Neighbor search itself is excluded:
/// it runs once per cloud, outside the differentiable path.
pub fn count_flops(config: &PnpConfig, n: usize) -> Result<FlopCount> {
    config.validate()?;
    let n = n as u64;
    let c = config.channels as u64;
    let r = config.reduced() as u64;
    let k = config.effective_neighbors() as u64;
    let half = c / 2;

    let act = cost::ACTIVATION_PER_ELEM;
    let bn = cost::BATCH_NORM_PER_ELEM;
    let pool = cost::POOL_PER_INPUT_ELEM;
    let elem = cost::ELEMWISE_PER_ELEM;
    let edge = cost::EDGE_DIFF_PER_COMPONENT;
    let bil = cost::BILINEAR_PER_ELEM;

    let expand_act = match config.expand_activation {
        MlpActivation::Relu => n * c * act,
        MlpActivation::None => 0,
    };

    let per_stage = vec![
        ("geometric_graph", n * k * 3 * edge),
        (
            "geo_encoder",
            n * k * 6 * half + n * k * half * bn + n * k * half * act,
        ),
        (
            "feat_encoder",
            n * k * 2 * c * half + n * k * half * bn + n * k * half * act,
        ),
        ("feature_graph", n * k * c * edge),
        ("local_pooling", 2 * n * k * half * pool),
        ("projections", 2 * n * c * r),
        ("descriptor_rectify", 2 * n * r * act),
        ("descriptor_pooling", 2 * n * r * pool),
        ("bilinear_response", n * r * bil),
        ("shortcut_sums", 2 * n * r * elem),
        ("expand", n * r * c + n * c * bn + expand_act),
        ("regularization", n * c * elem),
        ("output_activation", n * c * act),
    ];
    let total = per_stage.iter().map(|&(_, f)| f).sum();
    Ok(FlopCount { per_stage, total })
}

/// Runs a real forward on random data and returns what the tape counted.
pub fn instrumented_flops(config: &PnpConfig, n: usize, seed: u64) -> Result<u64> {
    let mut rng = Rng::new(seed);
    let cloud = PointCloud::new(Tensor::from_fn(&[n, 3], |_| rng.uniform(-1.0, 1.0)))?;
    let mut params = PnpParams::init(config, &mut rng)?;
    params.set_mode(BnMode::Eval);
    let features = Tensor::from_fn(&[n, config.channels], |_| rng.uniform(-1.0, 1.0));

    let idx = block::search_neighbors(&cloud, config)?;
    let mut tape = GradTape::new();
    let fid = tape.var(features);
    let search_free = tape.flops();
    debug_assert_eq!(search_free, 0);
    let ids = params.register(&mut tape);
    block::forward(&mut tape, &params, &ids, &cloud, fid, &idx, config)?;
    Ok(tape.flops())
}
