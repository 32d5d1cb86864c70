//! End-to-end training of the toy shape classifier, with and without the
//! refinement block, on a reduced dataset so it finishes in under a minute.
//!
//! ```bash
//! cargo run --release --example train_classifier
//! ```

use pnp3d::pnp::{complexity, PnpConfig};
use pnp3d::toy::{generate, train, ClassifierConfig, DatasetSpec};

fn main() {
    let dataset_spec = DatasetSpec {
        points_per_cloud: 256,
        noise_sigma: 0.15,
        seed: 7,
        train_per_class: 60,
        test_per_class: 25,
        ..DatasetSpec::default()
    };
    let data = generate(&dataset_spec).unwrap();
    println!(
        "dataset: {} train / {} test clouds, {} points each, classes {:?}",
        data.train.len(),
        data.test.len(),
        dataset_spec.points_per_cloud,
        data.classes.iter().map(|c| c.name()).collect::<Vec<_>>()
    );

    let mut pnp = PnpConfig::new(16, 8);
    pnp.reduction = 4;
    let mut cfg = ClassifierConfig {
        lift_dim: 16,
        use_pnp: false,
        pnp,
        classes: 4,
        learning_rate: 0.02,
        epochs: 8,
        batch_size: 16,
        seed: 1,
    };

    for use_pnp in [false, true] {
        cfg.use_pnp = use_pnp;
        let label = if use_pnp { "with block   " } else { "baseline     " };
        let (_, report) = train(&cfg, &data).unwrap();
        println!(
            "{label} params {:>5}  final test accuracy {:.3}  ({:.1}s)",
            report.param_count, report.final_test_accuracy, report.wall_time_secs
        );
        for e in &report.epochs {
            println!(
                "  epoch {}: loss {:.3}, train acc {:.3}, test acc {:.3}",
                e.epoch, e.loss, e.train_accuracy, e.test_accuracy
            );
        }
    }

    // The parameter difference between the two models is exactly the
    // block's analytic budget.
    let block_params = complexity::count_params(&cfg.pnp).unwrap().total;
    println!("block parameter budget (analytic): {block_params}");
}
