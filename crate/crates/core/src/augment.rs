//! Channel-space augmentation and multi-offset encodings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::{encode, BevImage, GridConfig};
use crate::kitti_io::PointCloud;

/// Vertical offsets used for multi-offset inference, in meters.
pub const MULTI_OFFSETS: [f64; 3] = [-0.3, 0.0, 0.3];

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("dz range must be symmetric and ordered, got ({0}, {1})")]
    DzRange(f64, f64),
    #[error("sigma must be finite and non-negative, got {0}")]
    Sigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub dz_min: f64,
    pub dz_max: f64,
    /// Standard deviation of the image-wide jitter, in 8-bit intensity units.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { dz_min: -0.3, dz_max: 0.3, sigma: 20.0, seed: 0 }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.dz_min <= self.dz_max) || (self.dz_min + self.dz_max).abs() > 1e-12 {
            return Err(AugmentError::DzRange(self.dz_min, self.dz_max));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(AugmentError::Sigma(self.sigma));
        }
        Ok(())
    }

    /// Parameters for one frame of a dataset: same distribution, seed derived
    /// from the global seed and the frame id.
    pub fn for_frame(&self, frame_id: &str) -> AugmentParams {
        AugmentParams { seed: frame_seed(self.seed, frame_id), ..*self }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable per-frame seed: FNV-1a of the frame id mixed with the global seed.
pub fn frame_seed(global: u64, frame_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in frame_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(global ^ splitmix64(h))
}

/// Shifts every height by `dz`; x, y and reflectance are untouched.
pub fn rebin_shift(cloud: &PointCloud, dz: f64) -> PointCloud {
    let mut out = cloud.clone();
    for p in &mut out.points {
        p.z += dz;
    }
    out
}

/// Adds `j` to every nonzero channel value, saturating to `[0, 255]`. Zero
/// values stay zero.
pub fn jitter(img: &BevImage, j: f64) -> BevImage {
    let mut out = img.clone();
    for px in out.pixels_mut() {
        if *px != 0 {
            *px = (*px as f64 + j).clamp(0.0, 255.0).round() as u8;
        }
    }
    out
}

/// One augmented sample and the random draws that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFrame {
    pub image: BevImage,
    pub dz: f64,
    pub jitter: f64,
}

/// Draws `dz ~ U(dz_min, dz_max)` and `J ~ N(0, sigma^2)` from a generator
/// seeded with `params.seed`, then returns `jitter(encode(shift(cloud)), J)`.
pub fn augment_frame(cloud: &PointCloud, params: &AugmentParams, grid: &GridConfig) -> AugmentedFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let dz = if params.dz_max > params.dz_min { rng.random_range(params.dz_min..=params.dz_max) } else { params.dz_min };
    let j = if params.sigma > 0.0 {
        Normal::new(0.0, params.sigma).expect("sigma validated").sample(&mut rng)
    } else {
        0.0
    };
    let image = jitter(&encode(&rebin_shift(cloud, dz), grid), j);
    AugmentedFrame { image, dz, jitter: j }
}

/// Encodings at each of [`MULTI_OFFSETS`].
pub fn multi_offset_encode(cloud: &PointCloud, grid: &GridConfig) -> [BevImage; 3] {
    MULTI_OFFSETS.map(|dz| encode(&rebin_shift(cloud, dz), grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::{band_of, Band};
    use crate::kitti_io::Point;
    use proptest::prelude::*;

    fn cloud(points: &[(f64, f64, f64, f64)]) -> PointCloud {
        PointCloud::new(points.iter().map(|&(x, y, z, r)| Point::new(x, y, z, r)).collect()).unwrap()
    }

    #[test]
    fn shift_examples() {
        let g = GridConfig::default();
        let c = cloud(&[(5.0, 1.0, -1.08, 0.4), (20.0, -3.0, 0.2, 0.9)]);
        assert_eq!(rebin_shift(&c, 0.0), c);
        assert_eq!(band_of(c.points[0].z, &g), Band::Mid);
        let shifted = rebin_shift(&c, -0.01);
        assert_eq!(band_of(shifted.points[0].z, &g), Band::Low);
        assert_eq!((shifted.points[1].x, shifted.points[1].y, shifted.points[1].reflectance), (20.0, -3.0, 0.9));
        let back = rebin_shift(&rebin_shift(&c, 0.3), -0.3);
        for (a, b) in back.points.iter().zip(&c.points) {
            assert!((a.z - b.z).abs() < 1e-7);
        }
    }

    #[test]
    fn jitter_examples() {
        let g = GridConfig::with_roi((0.0, 0.3), (0.0, 0.1), 0.1).unwrap();
        let mut img = BevImage::zeros(g);
        img.set(0, 0, 0, 250);
        img.set(1, 0, 1, 10);
        assert_eq!(jitter(&img, 0.0), img);
        let up = jitter(&img, 20.0);
        assert_eq!(up.get(0, 0, 0), 255);
        assert_eq!(up.get(1, 0, 1), 30);
        assert_eq!(up.get(2, 0, 2), 0);
        let down = jitter(&img, -20.0);
        assert_eq!(down.get(1, 0, 1), 0);
        assert_eq!(down.get(0, 0, 0), 230);
        assert_eq!(jitter(&img, 0.4).get(1, 0, 1), 10);
        assert_eq!(jitter(&img, 0.6).get(1, 0, 1), 11);
    }

    #[test]
    fn params_validation() {
        AugmentParams::default().validate().unwrap();
        assert!(AugmentParams { dz_min: -0.2, dz_max: 0.3, ..Default::default() }.validate().is_err());
        assert!(AugmentParams { sigma: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn augmentation_is_deterministic() {
        let g = GridConfig::default();
        let c = cloud(&[(12.0, 3.0, -1.0, 0.3), (12.0, 3.0, -0.2, 0.1), (40.0, -20.0, -1.6, 0.05)]);
        let p = AugmentParams { seed: 42, ..Default::default() };
        let a = augment_frame(&c, &p, &g);
        assert_eq!(a, augment_frame(&c, &p, &g));
        assert!((-0.3..=0.3).contains(&a.dz));
        let other = augment_frame(&c, &AugmentParams { seed: 43, ..p }, &g);
        assert_ne!((a.dz, a.jitter), (other.dz, other.jitter));
    }

    #[test]
    fn degenerate_params_equal_plain_encode() {
        let g = GridConfig::default();
        let c = cloud(&[(12.0, 3.0, -1.0, 0.3), (30.0, -3.0, 0.0, 0.7)]);
        let p = AugmentParams { dz_min: 0.0, dz_max: 0.0, sigma: 0.0, seed: 9 };
        assert_eq!(augment_frame(&c, &p, &g).image, encode(&c, &g));
    }

    #[test]
    fn frame_seeds_differ_and_repeat() {
        assert_eq!(frame_seed(1, "000001"), frame_seed(1, "000001"));
        assert_ne!(frame_seed(1, "000001"), frame_seed(1, "000002"));
        assert_ne!(frame_seed(1, "000001"), frame_seed(2, "000001"));
    }

    #[test]
    fn multi_offset_examples() {
        let g = GridConfig::default();
        let c = cloud(&[(10.0, 0.0, 1.31 - 1.73, 0.5)]);
        let [lo, mid, hi] = multi_offset_encode(&c, &g);
        assert_eq!(mid, encode(&c, &g));
        assert_eq!(mid.get(100, 400, 2), 199);
        assert_eq!(lo.get(100, 400, 1), 199);
        assert_eq!(lo.get(100, 400, 2), 0);
        assert_eq!(hi.get(100, 400, 2), 199);
        for img in multi_offset_encode(&PointCloud::default(), &g) {
            assert_eq!(img.nonzero_count(), 0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn jitter_preserves_zeros(
            pts in prop::collection::vec((0.0f64..70.0, -40.0f64..40.0, -3.0f64..1.0, 0.0f64..=1.0), 0..200),
            seed in any::<u64>(),
        ) {
            let g = GridConfig::default();
            let c = cloud(&pts);
            let p = AugmentParams { seed, ..Default::default() };
            let aug = augment_frame(&c, &p, &g);
            let shifted = encode(&rebin_shift(&c, aug.dz), &g);
            for (a, s) in aug.image.pixels().iter().zip(shifted.pixels()) {
                if *s == 0 {
                    prop_assert_eq!(*a, 0);
                }
            }
        }

        #[test]
        fn shift_commutes_with_roi(
            pts in prop::collection::vec((-10.0f64..80.0, -50.0f64..50.0, -3.0f64..1.0, 0.0f64..=1.0), 0..100),
            dz in -0.3f64..0.3,
        ) {
            let g = GridConfig::default();
            let c = cloud(&pts);
            let inside = |c: &PointCloud| c.points.iter().map(|p| crate::bev::cell_of(p.x, p.y, &g)).collect::<Vec<_>>();
            prop_assert_eq!(inside(&rebin_shift(&c, dz)), inside(&c));
        }
    }
}
