//! File formats: point-cloud text files, the tensor checkpoint container,
//! and the strict JSON run configuration.

pub mod checkpoint;
pub mod cloud;
pub mod run_config;

pub use cloud::{load_cloud, parse_cloud, save_xyz};
pub use run_config::{load_run_config, parse_run_config, OutputConfig, RunConfig};
