//! Synthetic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triband_core::geometry::{OrientedBevBox, ScoredBox};
use triband_core::{ObjectClass, Point, PointCloud};

/// `n` returns spread over a slightly larger area than the default grid.
pub fn synthetic_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            Point::new(
                rng.random_range(-5.0..75.0),
                rng.random_range(-45.0..45.0),
                rng.random_range(-2.2..1.0),
                rng.random_range(0.0..=1.0),
            )
        })
        .collect();
    PointCloud::new(points).expect("reflectance in range")
}

/// Car-sized boxes scattered over a 40 m square.
pub fn synthetic_boxes(n: usize, seed: u64) -> Vec<ScoredBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ScoredBox {
            bbox: OrientedBevBox::new(
                rng.random_range(0.0..40.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(1.4..2.0),
                rng.random_range(3.2..4.8),
                rng.random_range(-3.1..3.1),
            )
            .expect("positive extents"),
            score: rng.random_range(0.0..1.0),
            class: ObjectClass::Car,
        })
        .collect()
}
