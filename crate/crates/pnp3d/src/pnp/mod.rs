//! The plug-and-play refinement block, its published variants, and its
//! complexity accounting.

pub mod block;
pub mod check;
pub mod complexity;
pub mod config;
pub mod params;

pub use block::{
    backward, forward, forward_with_search, global_descriptor, global_perception,
    local_context_fusion, search_neighbors, BlockForward, BlockGradients, DescriptorAxis,
};
pub use check::{check_block_gradients, run_variant_suite, VariantOutcome};
pub use complexity::{count_flops, count_params, instrumented_flops, FlopCount, ParamCount};
pub use config::{PnpConfig, RegularizationOp};
pub use params::{PnpParamIds, PnpParams, LEAF_NAMES};
