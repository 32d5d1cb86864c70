//! The refinement block: local context fusion over spatial neighborhoods
//! followed by global bilinear regularization.
//!
//! Forward structure, all recorded on one tape:
//!
//! ```text
//! geometric graph [n x k x 6]  --geo mlp--> max over k --+
//!                                                        +--> local [n x C]
//! feature graph  [n x k x 2C]  --feat mlp-> max over k --+
//!
//! local * channel_proj --relu-> pool over points  -> channel descriptor [C/r]
//! local * point_proj   --relu-> pool over channels-> point descriptor  [n]
//! response[i][j] = combine(point_i, channel_j)            [n x C/r]
//! global = expand(response + local*channel_proj + local*point_proj)  [n x C]
//! output = mish(local (-|+|*) global)                     [n x C]
//! ```
//!
//! The two shortcut terms feed the raw (pre-activation) matrix products
//! into the expansion MLP; the rectifier applies only on the descriptor
//! path, where it guarantees the non-negativity the square-root combine
//! rules need.

use crate::error::{Error, Result};
use crate::numerics::batch_norm::BatchStats;
use crate::numerics::shared_mlp::MlpActivation;
use crate::numerics::tape::{GradTape, PoolMode, TensorId};
use crate::numerics::tensor::Tensor;
use crate::pnp::config::{PnpConfig, RegularizationOp};
use crate::pnp::params::{PnpParamIds, PnpParams};
use crate::spatial::{
    ball_query, build_feature_graph, build_geometric_graph, knn_search, NeighborIndex,
    PointCloud, SearchMode,
};

/// Which axis a global descriptor squeezes away.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescriptorAxis {
    /// Reduce over the n points: one response per compressed channel.
    Points,
    /// Reduce over the compressed channels: one response per point.
    Channels,
}

/// Everything a forward pass exposes for loss heads, inspection and
/// deterministic running-stat updates.
#[derive(Debug)]
pub struct BlockForward {
    /// Final refined feature map `[n x C]`.
    pub output: TensorId,
    /// Local context fusion result `[n x C]`.
    pub local: TensorId,
    /// Global perception map `[n x C]`.
    pub global: TensorId,
    /// Bilinear response `[n x C/r]`.
    pub response: TensorId,
    /// Training-mode batch statistics in canonical order
    /// (geo encoder, feature encoder, expansion); empty in eval mode.
    pub bn_stats: Vec<BatchStats>,
}

/// Gradients of a scalar head with respect to the block inputs.
pub struct BlockGradients {
    /// d loss / d features, `[n x C]`.
    pub features: Tensor,
    /// One gradient per learnable leaf, in [`crate::pnp::params::LEAF_NAMES`] order.
    pub params: Vec<Tensor>,
}

/// Collects neighborhoods the way the config asks for.
pub fn search_neighbors(cloud: &PointCloud, config: &PnpConfig) -> Result<NeighborIndex> {
    let k = config.effective_neighbors();
    match config.neighbor_mode {
        SearchMode::Knn => knn_search(cloud, k),
        SearchMode::Ball { radius } => ball_query(cloud, radius, k),
    }
}

/// Fuses the max-pooled encodings of the geometric and feature graphs into
/// `[n x C]`, geometric half in columns `[0, C/2)`.
pub fn local_context_fusion(
    tape: &mut GradTape,
    params: &PnpParams,
    ids: &PnpParamIds,
    cloud: &PointCloud,
    features: TensorId,
    idx: &NeighborIndex,
) -> Result<(TensorId, Vec<BatchStats>)> {
    let fshape = tape.value(features).shape().to_vec();
    if fshape.len() != 2 || fshape[1] % 2 != 0 {
        return Err(Error::Config(format!(
            "local fusion needs an [n x C] feature map with even C, got {fshape:?}"
        )));
    }
    if fshape[0] != cloud.len() {
        return Err(Error::Integrity(format!(
            "feature map covers {} points, cloud has {}",
            fshape[0],
            cloud.len()
        )));
    }

    let mut stats = Vec::new();

    let geo_graph = build_geometric_graph(tape, cloud, idx)?;
    let (geo_enc, s) = params
        .geo_encoder
        .apply(tape, ids.geo, geo_graph, MlpActivation::Relu)?;
    if let Some(s) = s {
        stats.push(s);
    }
    let geo_ctx = tape.pool(geo_enc, 1, PoolMode::Max)?;

    let feat_graph = build_feature_graph(tape, features, idx)?;
    let (feat_enc, s) = params
        .feat_encoder
        .apply(tape, ids.feat, feat_graph, MlpActivation::Relu)?;
    if let Some(s) = s {
        stats.push(s);
    }
    let feat_ctx = tape.pool(feat_enc, 1, PoolMode::Max)?;

    let local = tape.concat_last(geo_ctx, feat_ctx)?;
    Ok((local, stats))
}

/// Projects the fused map through `proj`, rectifies, and squeezes the named
/// axis into a descriptor. Returns `(descriptor, raw_projection)`; the raw
/// (pre-rectifier) projection is what the shortcut connections consume.
pub fn global_descriptor(
    tape: &mut GradTape,
    local: TensorId,
    proj: TensorId,
    axis: DescriptorAxis,
    mode: PoolMode,
) -> Result<(TensorId, TensorId)> {
    let raw = tape.matmul(local, proj)?;
    let activated = tape.relu(raw);
    let descriptor = match axis {
        DescriptorAxis::Points => tape.pool(activated, 0, mode)?,
        DescriptorAxis::Channels => tape.pool(activated, 1, mode)?,
    };
    Ok((descriptor, raw))
}

/// Sums the bilinear response with both shortcut projections and expands
/// back to the full channel width.
pub fn global_perception(
    tape: &mut GradTape,
    params: &PnpParams,
    ids: &PnpParamIds,
    response: TensorId,
    channel_shortcut: TensorId,
    point_shortcut: TensorId,
    activation: MlpActivation,
) -> Result<(TensorId, Option<BatchStats>)> {
    let with_channel = tape.add(response, channel_shortcut)?;
    let summed = tape.add(with_channel, point_shortcut)?;
    params.expand.apply(tape, ids.expand, summed, activation)
}

/// Full block forward over a precomputed neighborhood table.
pub fn forward(
    tape: &mut GradTape,
    params: &PnpParams,
    ids: &PnpParamIds,
    cloud: &PointCloud,
    features: TensorId,
    idx: &NeighborIndex,
    config: &PnpConfig,
) -> Result<BlockForward> {
    config.validate()?;
    let fshape = tape.value(features).shape().to_vec();
    if fshape.len() != 2 || fshape[1] != config.channels {
        return Err(Error::Config(format!(
            "feature map {fshape:?} does not match configured channels {}",
            config.channels
        )));
    }

    let (local, mut bn_stats) = local_context_fusion(tape, params, ids, cloud, features, idx)?;

    let (channel_desc, channel_shortcut) = global_descriptor(
        tape,
        local,
        ids.channel_proj,
        DescriptorAxis::Points,
        config.pooling,
    )?;
    let (point_desc, point_shortcut) = global_descriptor(
        tape,
        local,
        ids.point_proj,
        DescriptorAxis::Channels,
        config.pooling,
    )?;

    let response = tape.bilinear(point_desc, channel_desc, config.combine)?;
    let (global, expand_stats) = global_perception(
        tape,
        params,
        ids,
        response,
        channel_shortcut,
        point_shortcut,
        config.expand_activation,
    )?;
    if let Some(s) = expand_stats {
        bn_stats.push(s);
    }

    let combined = match config.regularization {
        RegularizationOp::Subtract => tape.sub(local, global)?,
        RegularizationOp::Sum => tape.add(local, global)?,
        RegularizationOp::Product => tape.mul(local, global)?,
    };
    let output = tape.mish(combined);

    Ok(BlockForward {
        output,
        local,
        global,
        response,
        bn_stats,
    })
}

/// Convenience: neighbor search plus forward on a fresh graph.
pub fn forward_with_search(
    tape: &mut GradTape,
    params: &PnpParams,
    ids: &PnpParamIds,
    cloud: &PointCloud,
    features: TensorId,
    config: &PnpConfig,
) -> Result<(BlockForward, NeighborIndex)> {
    let idx = search_neighbors(cloud, config)?;
    let fwd = forward(tape, params, ids, cloud, features, &idx, config)?;
    Ok((fwd, idx))
}

/// Reverse pass: seeds `d_out` at the block output and extracts gradients
/// for the input features and every learnable leaf.
pub fn backward(
    tape: &GradTape,
    output: TensorId,
    features: TensorId,
    ids: &PnpParamIds,
    d_out: Tensor,
) -> Result<BlockGradients> {
    let grads = tape.backward(output, d_out)?;
    Ok(BlockGradients {
        features: grads.get(features),
        params: ids.leaves().into_iter().map(|id| grads.get(id)).collect(),
    })
}
