//! Dense-tensor arithmetic with explicit forward and reverse-mode passes
//! for every primitive the refinement block needs.

pub mod batch_norm;
pub mod gradcheck;
pub mod shared_mlp;
pub mod tape;
pub mod tensor;

pub use batch_norm::{BatchNormState, BatchStats, BnMode};
pub use shared_mlp::{MlpActivation, SharedMlp, SharedMlpIds};
pub use tape::{CombineRule, GradTape, Gradients, PoolMode, TensorId};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    proptest! {
        // relu and mish are monotone non-decreasing for x >= 0 (mish dips
        // below zero only on the negative side).
        #[test]
        fn activations_monotone_on_non_negative_grid(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let mut xs: Vec<f64> = (0..64).map(|_| rng.uniform(0.0, 25.0)).collect();
            xs.sort_by(f64::total_cmp);
            for w in xs.windows(2) {
                prop_assert!(tape::mish_value(w[1]) >= tape::mish_value(w[0]));
                prop_assert!(w[1].max(0.0) >= w[0].max(0.0));
            }
        }

        // Forward passes on finite inputs never produce non-finite values.
        #[test]
        fn forward_stays_finite(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let x = Tensor::random_uniform(&[5, 4], -100.0, 100.0, &mut rng);
            let w = Tensor::random_uniform(&[4, 3], -100.0, 100.0, &mut rng);
            let mut tape = GradTape::new();
            let ix = tape.var(x);
            let iw = tape.var(w);
            let y = tape.matmul(ix, iw).unwrap();
            let y = tape.mish(y);
            let p = tape.pool(y, 0, PoolMode::Avg).unwrap();
            prop_assert!(tape.value(p).all_finite());
        }
    }
}
