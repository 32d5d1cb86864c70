//! A miniature ablation over the published variant grid: six
//! pooling/regularization combinations plus the five alternative combine
//! rules, each trained with identical seeds.
//!
//! ```bash
//! cargo run --release --example ablation_sweep
//! ```

use pnp3d::cli::ablation_grid;
use pnp3d::pnp::PnpConfig;
use pnp3d::toy::{generate, neighbor_tables, train_with_tables, ClassifierConfig, DatasetSpec};

fn main() {
    // Small enough to sweep all eleven variants in about a minute.
    let dataset_spec = DatasetSpec {
        points_per_cloud: 128,
        noise_sigma: 0.25,
        seed: 7,
        train_per_class: 25,
        test_per_class: 10,
        ..DatasetSpec::default()
    };
    let data = generate(&dataset_spec).unwrap();

    let mut pnp = PnpConfig::new(16, 8);
    pnp.reduction = 4;
    let template = ClassifierConfig {
        lift_dim: 16,
        use_pnp: true,
        pnp,
        classes: 4,
        learning_rate: 0.02,
        epochs: 5,
        batch_size: 16,
        seed: 1,
    };
    let seeds = [1u64, 2];

    let train_tables = neighbor_tables(&data.train, &template).unwrap();
    let test_tables = neighbor_tables(&data.test, &template).unwrap();

    println!("pooling,regularization,combine,mean_accuracy,reference");
    for (pooling, regularization, combine) in ablation_grid() {
        let mut sum = 0.0;
        for &seed in &seeds {
            let mut cfg = template.clone();
            cfg.pnp.pooling = pooling;
            cfg.pnp.regularization = regularization;
            cfg.pnp.combine = combine;
            cfg.seed = seed;
            let (_, report) =
                train_with_tables(&cfg, &data, &train_tables, &test_tables).unwrap();
            sum += report.final_test_accuracy;
        }
        let reference = pooling == pnp3d::PoolMode::Avg
            && regularization == pnp3d::RegularizationOp::Subtract
            && combine == pnp3d::CombineRule::GeometricMean;
        println!(
            "{:?},{},{},{:.4},{}",
            pooling,
            regularization.name(),
            combine.name(),
            sum / seeds.len() as f64,
            reference
        );
    }
}
