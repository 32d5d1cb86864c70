//! End-to-end toy classifier over procedurally generated shapes,
//! demonstrating the plug-and-play improvement at desk scale.

pub mod classifier;
pub mod dataset;
pub mod train;

pub use classifier::{ClassifierConfig, ClassifierForward, ClassifierParams};
pub use dataset::{generate, Dataset, DatasetSpec, LabeledCloud, ShapeClass};
pub use train::{
    evaluate, neighbor_tables, softmax, train, train_with_tables, EpochRecord, TrainReport,
};
