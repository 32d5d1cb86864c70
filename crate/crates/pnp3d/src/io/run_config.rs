//! Strictly parsed JSON run configuration.
//!
//! Every section rejects unknown keys, so a misspelled option fails loudly
//! instead of silently falling back to a default. Omitted sections and
//! fields take the defaults of the published final model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy::classifier::ClassifierConfig;
use crate::toy::dataset::DatasetSpec;

/// File names (relative to the output directory) each command writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub report: String,
    pub checkpoint: String,
    pub eval_report: String,
    pub ablation: String,
    pub bench: String,
    pub features: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            report: "report.json".into(),
            checkpoint: "model.ckpt".into(),
            eval_report: "eval.json".into(),
            ablation: "ablation.csv".into(),
            bench: "bench.txt".into(),
            features: "features.csv".into(),
        }
    }
}

/// Top-level configuration consumed by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub classifier: ClassifierConfig,
    pub dataset: DatasetSpec,
    /// Seeds the ablation sweep trains each variant with.
    pub ablation_seeds: Vec<u64>,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.dataset.validate()?;
        if self.classifier.classes != self.dataset.classes.len() {
            return Err(Error::Config(format!(
                "classifier expects {} classes but the dataset defines {}",
                self.classifier.classes,
                self.dataset.classes.len()
            )));
        }
        Ok(())
    }

    /// The five-seed comparison protocol by default.
    pub fn default_ablation_seeds() -> Vec<u64> {
        vec![1, 2, 3, 4, 5]
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if config.ablation_seeds.is_empty() {
        config.ablation_seeds = RunConfig::default_ablation_seeds();
    }
    config.validate()?;
    Ok(config)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_run_config(&text)
}
