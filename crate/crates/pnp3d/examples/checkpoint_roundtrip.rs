//! The checkpoint container: named f64 tensors behind a JSON header,
//! little-endian throughout, bit-exact across save/load.
//!
//! ```bash
//! cargo run --example checkpoint_roundtrip
//! ```

use pnp3d::io::checkpoint;
use pnp3d::rng::Rng;
use pnp3d::toy::{ClassifierConfig, ClassifierParams};

fn main() {
    let mut cfg = ClassifierConfig::default();
    cfg.lift_dim = 16;
    cfg.pnp.channels = 16;
    cfg.pnp.neighbors = 8;

    let params = ClassifierParams::init(&cfg, &mut Rng::new(9)).unwrap();
    let named = params.named_tensors();
    println!("model tensors:");
    for (name, t) in &named {
        println!("  {name:<34} {:?}", t.shape());
    }

    let path = std::env::temp_dir().join("pnp3d-example.ckpt");
    checkpoint::save(&path, &named).unwrap();
    let bytes = std::fs::metadata(&path).unwrap().len();
    println!("wrote {} tensors, {bytes} bytes, to {}", named.len(), path.display());

    let loaded = checkpoint::load(&path).unwrap();
    let mut restored = ClassifierParams::init(&cfg, &mut Rng::new(12345)).unwrap();
    restored.load_named(&loaded).unwrap();

    for ((name, a), (_, b)) in named.iter().zip(restored.named_tensors()) {
        let bits_equal = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(bits_equal, "{name} changed across the round trip");
    }
    println!("round trip is bit-exact for every tensor");
    std::fs::remove_file(path).ok();
}
