//! Neighborhood search over 3D points: brute-force k-nearest-neighbors,
//! ball query, and the k-d tree accelerator, plus the local graphs built
//! on top of them.
//!
//! ```bash
//! cargo run --example neighbor_search
//! ```

use pnp3d::rng::Rng;
use pnp3d::spatial::kdtree::KdTree;
use pnp3d::{ball_query, geometric_graph_tensor, knn_search, PointCloud, Tensor};

fn main() {
    // Three collinear points make the neighbor structure obvious.
    let cloud = PointCloud::new(
        Tensor::new(
            vec![3, 3],
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0],
        )
        .unwrap(),
    )
    .unwrap();

    let knn = knn_search(&cloud, 2).unwrap();
    println!("points on a line at x = 0, 1, 3; k = 2:");
    for i in 0..3 {
        println!("  neighbors of point {i}: {:?}", knn.row(i));
    }

    // Ball query keeps only neighbors within the radius and pads the rest.
    let ball = ball_query(&cloud, 1.5, 2).unwrap();
    println!("ball query, radius 1.5:");
    for i in 0..3 {
        println!("  in-range neighbors of point {i}: {:?}", ball.row(i));
    }
    assert_eq!(ball.row(0), &[1, 1], "only point 1 is in range, padded");

    // The geometric graph pairs each point with edge vectors to neighbors.
    let graph = geometric_graph_tensor(&cloud, &knn).unwrap();
    println!(
        "geometric graph slot (0, 0) = {:?}  (center ; edge)",
        &graph.data()[..6]
    );

    // On larger random clouds the k-d tree must reproduce brute force
    // exactly, including distance ties.
    let mut rng = Rng::new(42);
    let big = PointCloud::new(Tensor::from_fn(&[500, 3], |_| rng.uniform(-1.0, 1.0))).unwrap();
    let brute = knn_search(&big, 8).unwrap();
    let tree = KdTree::build(&big).knn(8).unwrap();
    assert_eq!(brute, tree);
    println!("k-d tree output identical to brute force on 500 random points (k = 8)");
}
