//! Finite-difference verification of analytic gradients, from a single
//! primitive up to the full block across all 36 published variants.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use pnp3d::numerics::batch_norm::BnMode;
use pnp3d::numerics::gradcheck::{check_scalar_fn, FD_TOLERANCE};
use pnp3d::pnp::check;
use pnp3d::rng::Rng;
use pnp3d::Tensor;

fn main() {
    // A composite of primitives, checked through the one-call helper:
    // loss = sum(mish(a * b)).
    let mut rng = Rng::new(3);
    let a = Tensor::random_uniform(&[4, 5], -2.0, 2.0, &mut rng);
    let b = Tensor::random_uniform(&[5, 3], -2.0, 2.0, &mut rng);
    let err = check_scalar_fn(&[a, b], |tape, ids| {
        let y = tape.matmul(ids[0], ids[1])?;
        let y = tape.mish(y);
        let flat = tape.reshape(y, vec![1, 12])?;
        let ones = tape.var(Tensor::filled(&[12, 1], 1.0));
        let s = tape.matmul(flat, ones)?;
        tape.reshape(s, vec![1])
    })
    .unwrap();
    println!("matmul + mish composite: max relative error {err:.3e}");
    assert!(err < FD_TOLERANCE);

    // The full block, one variant, in both normalization modes.
    let config = check::suite_config(
        pnp3d::PoolMode::Avg,
        pnp3d::RegularizationOp::Subtract,
        pnp3d::CombineRule::GeometricMean,
    );
    for mode in [BnMode::Eval, BnMode::Training] {
        let err = check::check_block_gradients(&config, 12, 42, mode).unwrap();
        println!("full block, default variant, {mode:?} statistics: {err:.3e}");
        assert!(err < FD_TOLERANCE);
    }

    // All 36 variants (6 combine rules x 3 regularizations x 2 poolings).
    println!("running the 36-variant suite...");
    let outcomes = check::run_variant_suite(42).unwrap();
    let worst = outcomes
        .iter()
        .map(|o| o.max_rel_error)
        .fold(0.0_f64, f64::max);
    for o in outcomes.iter().take(3) {
        println!("  {:<40} {:.3e}", o.label(), o.max_rel_error);
    }
    println!("  ... ({} variants total, worst {worst:.3e})", outcomes.len());
    assert!(worst < FD_TOLERANCE);
}
