//! One forward pass of the refinement block: shapes of every intermediate,
//! the permutation-equivariance property, and a couple of variant configs.
//!
//! ```bash
//! cargo run --example block_forward
//! ```

use pnp3d::numerics::batch_norm::BnMode;
use pnp3d::pnp::{block, PnpConfig, PnpParams, RegularizationOp};
use pnp3d::rng::Rng;
use pnp3d::{CombineRule, GradTape, PointCloud, PoolMode, Tensor};

fn main() {
    let config = PnpConfig::new(32, 16); // C = 32, k = 16, defaults otherwise
    let mut rng = Rng::new(7);
    let n = 256;

    let cloud = PointCloud::new(Tensor::from_fn(&[n, 3], |_| rng.uniform(-1.0, 1.0))).unwrap();
    let features = Tensor::from_fn(&[n, 32], |_| rng.uniform(-1.0, 1.0));
    let mut params = PnpParams::init(&config, &mut rng).unwrap();
    params.set_mode(BnMode::Eval);

    let mut tape = GradTape::new();
    let fid = tape.var(features.clone());
    let ids = params.register(&mut tape);
    let (fwd, idx) =
        block::forward_with_search(&mut tape, &params, &ids, &cloud, fid, &config).unwrap();

    println!("input features: {:?}", features.shape());
    println!("neighbor table: {} x {}", idx.len(), idx.k());
    println!("local context:  {:?}", tape.value(fwd.local).shape());
    println!("bilinear map:   {:?}", tape.value(fwd.response).shape());
    println!("global map:     {:?}", tape.value(fwd.global).shape());
    println!("output:         {:?}  (same shape in, same shape out)", tape.value(fwd.output).shape());
    println!("multiply-adds:  {}", tape.flops());

    // The block commutes with point permutations.
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let permuted_cloud = cloud.permuted(&perm).unwrap();
    let permuted_features = Tensor::from_fn(&[n, 32], |flat| {
        let (row, col) = (flat / 32, flat % 32);
        features.data()[perm[row] * 32 + col]
    });

    let mut tape2 = GradTape::new();
    let fid2 = tape2.var(permuted_features);
    let ids2 = params.register(&mut tape2);
    let (fwd2, _) =
        block::forward_with_search(&mut tape2, &params, &ids2, &permuted_cloud, fid2, &config)
            .unwrap();

    let out = tape.value(fwd.output);
    let out_p = tape2.value(fwd2.output);
    let mut worst = 0.0_f64;
    for (new_row, &old_row) in perm.iter().enumerate() {
        for c in 0..32 {
            worst = worst.max((out_p.data()[new_row * 32 + c] - out.data()[old_row * 32 + c]).abs());
        }
    }
    println!("permutation equivariance deviation: {worst:.2e}");
    assert!(worst < 1e-12);

    // Variants change one knob at a time.
    for (label, cfg) in [
        ("max pooling", {
            let mut c = config;
            c.pooling = PoolMode::Max;
            c
        }),
        ("sum regularization", {
            let mut c = config;
            c.regularization = RegularizationOp::Sum;
            c
        }),
        ("harmonic mean", {
            let mut c = config;
            c.combine = CombineRule::HarmonicMean;
            c
        }),
    ] {
        let mut tape = GradTape::new();
        let fid = tape.var(features.clone());
        let ids = params.register(&mut tape);
        let fwd = block::forward(&mut tape, &params, &ids, &cloud, fid, &idx, &cfg).unwrap();
        let data = tape.value(fwd.output).data();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        println!("variant {label:<20} output mean {mean:+.4}");
    }
}
