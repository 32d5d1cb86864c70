//! Exports per-point activations before and after the block as CSV for
//! external heat-map plotting: train a small model, push one cloud
//! through it, min-max normalize the per-point mean activation.
//!
//! ```bash
//! cargo run --release --example feature_heatmap
//! ```

use pnp3d::numerics::batch_norm::BnMode;
use pnp3d::pnp::{block, PnpConfig};
use pnp3d::toy::classifier::forward;
use pnp3d::toy::{generate, train, ClassifierConfig, DatasetSpec};
use pnp3d::GradTape;

fn main() {
    let dataset_spec = DatasetSpec {
        points_per_cloud: 256,
        noise_sigma: 0.15,
        seed: 11,
        train_per_class: 30,
        test_per_class: 5,
        ..DatasetSpec::default()
    };
    let data = generate(&dataset_spec).unwrap();

    let mut pnp = PnpConfig::new(16, 8);
    pnp.reduction = 4;
    let cfg = ClassifierConfig {
        lift_dim: 16,
        use_pnp: true,
        pnp,
        classes: 4,
        learning_rate: 0.02,
        epochs: 6,
        batch_size: 16,
        seed: 1,
    };
    let (mut params, report) = train(&cfg, &data).unwrap();
    println!("trained model, test accuracy {:.3}", report.final_test_accuracy);

    // Per-cloud statistics at inference, as in evaluation.
    params.set_mode(BnMode::Training);
    let probe = &data.test[0];
    let idx = block::search_neighbors(&probe.cloud, &cfg.pnp).unwrap();
    let mut tape = GradTape::new();
    let ids = params.register(&mut tape);
    let fwd = forward(&mut tape, &params, &ids, &probe.cloud, Some(&idx), &cfg.pnp).unwrap();

    let normalize = |features: &[f64], n: usize| -> Vec<f64> {
        let c = features.len() / n;
        let mut heat: Vec<f64> = (0..n)
            .map(|i| features[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let lo = heat.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = heat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in &mut heat {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
        heat
    };
    let n = probe.cloud.len();
    let before = normalize(tape.value(fwd.before_block).data(), n);
    let after = normalize(tape.value(fwd.after_block.unwrap()).data(), n);

    println!("x,y,z,before,after");
    for i in (0..n).step_by(16) {
        let p = probe.cloud.point(i);
        println!(
            "{:.4},{:.4},{:.4},{:.4},{:.4}",
            p[0], p[1], p[2], before[i], after[i]
        );
    }
    println!("... ({n} rows total; the pnp3d binary's dump-features writes the full file)");
    assert!(before.iter().chain(&after).all(|v| (0.0..=1.0).contains(v)));
}
