//! Parameter and multiply-add accounting: the closed-form counts against
//! enumeration and an instrumented forward pass, plus linearity in the
//! point count.
//!
//! ```bash
//! cargo run --release --example complexity_report
//! ```

use pnp3d::pnp::{complexity, PnpConfig, PnpParams};
use pnp3d::rng::Rng;

fn main() {
    let config = PnpConfig::new(64, 16); // published width, r = 8

    let params = complexity::count_params(&config).unwrap();
    let enumerated = PnpParams::init(&config, &mut Rng::new(1))
        .unwrap()
        .param_count();
    println!("parameters, C = 64, r = 8:");
    for (name, count) in &params.per_tensor {
        println!("  {name:<26} {count:>7}");
    }
    println!("  {:<26} {:>7}", "total (analytic)", params.total);
    println!("  {:<26} {enumerated:>7}", "total (enumerated)");
    assert_eq!(params.total, enumerated);

    println!("\nmultiply-adds per forward pass:");
    for n in [256usize, 1024, 4096] {
        let analytic = complexity::count_flops(&config, n).unwrap();
        let instrumented = complexity::instrumented_flops(&config, n, 5).unwrap();
        assert_eq!(analytic.total, instrumented);
        println!(
            "  n = {n:>4}: {:>12} (analytic) == {instrumented:>12} (instrumented)",
            analytic.total
        );
    }

    let f1 = complexity::count_flops(&config, 1024).unwrap().total;
    let f2 = complexity::count_flops(&config, 2048).unwrap().total;
    println!("\ndoubling n: {f1} -> {f2} (ratio {:.3})", f2 as f64 / f1 as f64);
    assert_eq!(f2, 2 * f1, "the block is linear in the point count");

    println!("\nper-stage breakdown at n = 1024:");
    let detail = complexity::count_flops(&config, 1024).unwrap();
    for (stage, flops) in &detail.per_stage {
        println!("  {stage:<22} {flops:>12}");
    }
}
