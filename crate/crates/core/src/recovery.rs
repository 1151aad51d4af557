//! Lifting BEV detections to 3D boxes.
//!
//! The bottom plane comes from the lowest returns inside a range-dilated
//! footprint, the top plane from the highest returns inside the footprint
//! itself. Both samples pass through a Tukey fence before the extreme is
//! taken, and implausible heights fall back to a fixed prior.

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::GridConfig;
use crate::class::ObjectClass;
use crate::geometry::{dilate_polygon, Box3D, OrientedBevBox, Polygon};
use crate::kitti_io::{lidar_box_to_camera, Calibration, Detection3D, PointCloud};
use crate::net::DecodedDetection;

#[derive(Debug, Error, PartialEq)]
pub enum RecoveryError {
    #[error("empty input")]
    EmptyInput,
    #[error("no LiDAR returns inside the dilated footprint")]
    NoSupportingPoints,
    #[error("invalid recovery parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryParams {
    pub alpha: f64,
    pub d_max: f64,
    pub n_extreme: usize,
    pub iqr_k: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub h_default: f64,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        RecoveryParams { alpha: 2.5, d_max: 80.0, n_extreme: 10, iqr_k: 1.5, h_min: 1.25, h_max: 2.1, h_default: 1.6 }
    }
}

impl RecoveryParams {
    pub fn validate(&self) -> Result<(), RecoveryError> {
        let positive = [self.alpha, self.d_max, self.iqr_k, self.h_min, self.h_max, self.h_default];
        if positive.iter().any(|v| !(*v > 0.0)) || self.n_extreme == 0 {
            return Err(RecoveryError::InvalidParams("all parameters must be positive".into()));
        }
        if self.h_min >= self.h_max {
            return Err(RecoveryError::InvalidParams("h_min must be below h_max".into()));
        }
        Ok(())
    }
}

/// z values of the returns whose (x, y) lies inside or on the polygon.
pub fn points_in_polygon(cloud: &PointCloud, poly: &Polygon) -> Vec<f64> {
    let (x0, y0, x1, y1) = poly.bounds();
    cloud
        .points
        .iter()
        .filter(|p| p.x >= x0 - 1e-9 && p.x <= x1 + 1e-9 && p.y >= y0 - 1e-9 && p.y <= y1 + 1e-9)
        .filter(|p| poly.contains(crate::geometry::Point2::new(p.x, p.y)))
        .map(|p| p.z)
        .collect()
}

/// Percentile of a sorted sample, linear interpolation between closest ranks
/// (position `q * (n - 1)`).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `[Q1 - k * IQR, Q3 + k * IQR]`
pub fn tukey_fence(values: &[f64], k: f64) -> Result<(f64, f64), RecoveryError> {
    if values.is_empty() {
        return Err(RecoveryError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = percentile_sorted(&sorted, 0.25);
    let q3 = percentile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    Ok((q1 - k * iqr, q3 + k * iqr))
}

/// Order-preserving Tukey filter with fence factor `k`.
pub fn tukey_inliers_with(values: &[f64], k: f64) -> Result<Vec<f64>, RecoveryError> {
    let (lo, hi) = tukey_fence(values, k)?;
    Ok(values.iter().copied().filter(|v| (lo..=hi).contains(v)).collect())
}

/// [`tukey_inliers_with`] at the standard factor 1.5.
pub fn tukey_inliers(values: &[f64]) -> Result<Vec<f64>, RecoveryError> {
    tukey_inliers_with(values, 1.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub z_bottom: f64,
    pub z_top: f64,
    pub used_prior: bool,
}

impl Extent {
    pub fn height(&self) -> f64 {
        self.z_top - self.z_bottom
    }
}

fn smallest(mut zs: Vec<f64>, n: usize) -> Vec<f64> {
    zs.sort_by(f64::total_cmp);
    zs.truncate(n);
    zs
}

fn largest(mut zs: Vec<f64>, n: usize) -> Vec<f64> {
    zs.sort_by(|a, b| b.total_cmp(a));
    zs.truncate(n);
    zs
}

/// Vertical extent of the object under `footprint`.
pub fn estimate_extent(cloud: &PointCloud, footprint: &OrientedBevBox, params: &RecoveryParams) -> Result<Extent, RecoveryError> {
    let poly = footprint.polygon();
    let dilated = dilate_polygon(&poly, footprint.range(), params.alpha, params.d_max);

    let bottom_sample = smallest(points_in_polygon(cloud, &dilated), params.n_extreme);
    if bottom_sample.is_empty() {
        return Err(RecoveryError::NoSupportingPoints);
    }
    let z_bottom = tukey_inliers_with(&bottom_sample, params.iqr_k)?.into_iter().fold(f64::INFINITY, f64::min);

    let top_sample = largest(points_in_polygon(cloud, &poly), params.n_extreme);
    let z_top = if top_sample.is_empty() {
        None
    } else {
        Some(tukey_inliers_with(&top_sample, params.iqr_k)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    };

    match z_top {
        Some(z_top) if (params.h_min..=params.h_max).contains(&(z_top - z_bottom)) => {
            Ok(Extent { z_bottom, z_top, used_prior: false })
        }
        _ => Ok(Extent { z_bottom, z_top: z_bottom + params.h_default, used_prior: true }),
    }
}

/// A detection that could not be lifted, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropped {
    pub index: usize,
    pub class: ObjectClass,
    pub score: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Recovered {
    pub detections: Vec<Detection3D>,
    pub boxes: Vec<Box3D>,
    pub dropped: Vec<Dropped>,
}

/// Lifts every BEV detection to a KITTI 3D box. Detections without support
/// in the cloud are dropped and reported.
pub fn recover(
    dets: &[DecodedDetection],
    cloud: &PointCloud,
    calib: &Calibration,
    grid: &GridConfig,
    params: &RecoveryParams,
) -> Recovered {
    let mut out = Recovered::default();
    for (index, det) in dets.iter().enumerate() {
        let drop = |reason: String| Dropped { index, class: det.class, score: det.score, reason };
        let footprint = match det.bbox.to_meters(grid) {
            Ok(f) => f,
            Err(e) => {
                out.dropped.push(drop(e.to_string()));
                continue;
            }
        };
        let extent = match estimate_extent(cloud, &footprint, params) {
            Ok(e) => e,
            Err(e) => {
                debug!("dropping detection {index} ({}, score {:.3}): {e}", det.class, det.score);
                out.dropped.push(drop(e.to_string()));
                continue;
            }
        };
        let b = Box3D { footprint, z_bottom: extent.z_bottom, z_top: extent.z_top };
        match lidar_box_to_camera(&b, calib) {
            Ok(cam) => {
                out.detections.push(Detection3D::from_camera_box(det.class, &cam, calib, det.score));
                out.boxes.push(b);
            }
            Err(e) => out.dropped.push(drop(e.to_string())),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kitti_io::Point;
    use proptest::prelude::*;

    fn cloud(points: &[(f64, f64, f64)]) -> PointCloud {
        PointCloud::new(points.iter().map(|&(x, y, z)| Point::new(x, y, z, 0.5)).collect()).unwrap()
    }

    #[test]
    fn polygon_queries() {
        let poly = OrientedBevBox::new(0.0, 0.0, 2.0, 2.0, 0.0).unwrap().polygon();
        assert!(points_in_polygon(&PointCloud::default(), &poly).is_empty());
        let c = cloud(&[(1.0, 0.0, 0.1), (1.0, 1.0, 0.2), (1.0001, 0.0, 0.3), (0.0, 0.0, 0.4)]);
        assert_eq!(points_in_polygon(&c, &poly), vec![0.1, 0.2, 0.4]);
    }

    #[test]
    fn tukey_examples() {
        assert_eq!(tukey_inliers(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tukey_inliers(&[5.0; 4]).unwrap(), vec![5.0; 4]);
        assert_eq!(tukey_inliers(&[3.0, 1.0, 2.0]).unwrap(), vec![3.0, 1.0, 2.0]);
        assert_eq!(tukey_inliers(&[7.0]).unwrap(), vec![7.0]);
        assert_eq!(tukey_inliers(&[]), Err(RecoveryError::EmptyInput));
        assert_eq!(tukey_fence(&[1.0, 2.0, 3.0, 4.0, 100.0], 1.5).unwrap(), (-1.0, 7.0));
    }

    /// Dense column of returns over a 4 x 1.8 m footprint at 15 m, z spanning
    /// `[z0, z1]`.
    fn car_cloud(z0: f64, z1: f64) -> Vec<(f64, f64, f64)> {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..9 {
                for k in 0..16 {
                    let z = z0 + (z1 - z0) * k as f64 / 15.0;
                    pts.push((13.1 + 0.2 * i as f64, -0.8 + 0.2 * j as f64, z));
                }
            }
        }
        pts
    }

    fn car_box() -> OrientedBevBox {
        OrientedBevBox::new(15.0, 0.0, 1.8, 4.0, 0.0).unwrap()
    }

    #[test]
    fn high_outlier_rejected() {
        let mut pts = car_cloud(-1.7, -0.2);
        pts.push((15.0, 0.0, 3.0));
        let e = estimate_extent(&cloud(&pts), &car_box(), &RecoveryParams::default()).unwrap();
        assert!(!e.used_prior);
        assert!((e.z_top + 0.2).abs() < 1e-9);
        assert!((e.height() - 1.5).abs() < 1e-9);
    }

    #[test]
    fn low_outlier_rejected() {
        let mut pts = car_cloud(-1.7, -0.2);
        pts.push((15.0, 0.2, -4.0));
        let e = estimate_extent(&cloud(&pts), &car_box(), &RecoveryParams::default()).unwrap();
        assert!(!e.used_prior);
        assert!((e.z_bottom + 1.7).abs() < 1e-9);
    }

    #[test]
    fn short_span_uses_prior() {
        let pts = car_cloud(-1.7, -1.2);
        let e = estimate_extent(&cloud(&pts), &car_box(), &RecoveryParams::default()).unwrap();
        assert!(e.used_prior);
        assert!((e.z_bottom + 1.7).abs() < 1e-9);
        assert_eq!(e.z_top, e.z_bottom + 1.6);
    }

    #[test]
    fn height_gate_boundaries_are_valid() {
        let p = RecoveryParams::default();
        for h in [1.25, 2.1] {
            let pts = vec![(15.0, 0.0, -1.5), (15.0, 0.0, -1.5 + h)];
            let e = estimate_extent(&cloud(&pts), &car_box(), &p).unwrap();
            assert!(!e.used_prior, "height {h}");
        }
        let pts = vec![(15.0, 0.0, -1.5), (15.0, 0.0, 0.61)];
        assert!(estimate_extent(&cloud(&pts), &car_box(), &p).unwrap().used_prior);
    }

    #[test]
    fn bottom_from_dilated_footprint() {
        // ground returns just outside the footprint but inside the dilation
        let mut pts = car_cloud(-1.5, -0.2);
        pts.extend((0..12).map(|i| (17.5, -0.6 + 0.1 * i as f64, -1.73)));
        let e = estimate_extent(&cloud(&pts), &car_box(), &RecoveryParams::default()).unwrap();
        assert!((e.z_bottom + 1.73).abs() < 1e-9);
        assert!((e.z_top + 0.2).abs() < 1e-9);
    }

    #[test]
    fn no_points_is_an_error() {
        let pts = vec![(40.0, 10.0, -1.0)];
        assert_eq!(estimate_extent(&cloud(&pts), &car_box(), &RecoveryParams::default()), Err(RecoveryError::NoSupportingPoints));
    }

    #[test]
    fn empty_top_query_falls_back_to_prior() {
        let pts = vec![(17.5, 0.0, -1.73)];
        let e = estimate_extent(&cloud(&pts), &car_box(), &RecoveryParams::default()).unwrap();
        assert!(e.used_prior);
        assert!((e.height() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        RecoveryParams::default().validate().unwrap();
        assert!(RecoveryParams { h_min: 3.0, ..Default::default() }.validate().is_err());
        assert!(RecoveryParams { n_extreme: 0, ..Default::default() }.validate().is_err());
    }

    fn oracle_quartile(sorted: &[f64], p: f64) -> f64 {
        // 1-based rank r = 1 + p (n - 1), interpolate between floor and ceil ranks
        let n = sorted.len() as f64;
        let rank = 1.0 + p * (n - 1.0);
        let below = rank.trunc();
        let w = rank - below;
        let a = sorted[below as usize - 1];
        let b = if (below as usize) < sorted.len() { sorted[below as usize] } else { a };
        a * (1.0 - w) + b * w
    }

    proptest! {
        #[test]
        fn tukey_matches_oracle_and_invariants(xs in prop::collection::vec(-10.0f64..10.0, 1..12)) {
            let kept = tukey_inliers(&xs).unwrap();
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            let (q1, q3) = (oracle_quartile(&sorted, 0.25), oracle_quartile(&sorted, 0.75));
            let (lo, hi) = (q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1));
            let expected: Vec<f64> = xs.iter().copied().filter(|&x| x >= lo && x <= hi).collect();
            prop_assert_eq!(&kept, &expected);

            let median = percentile_sorted(&sorted, 0.5);
            let mut kept_sorted = kept.clone();
            kept_sorted.sort_by(f64::total_cmp);
            prop_assert!(kept_sorted.first().unwrap() <= &median && kept_sorted.last().unwrap() >= &median);

            let wider = tukey_inliers_with(&xs, 3.0).unwrap();
            prop_assert!(kept.iter().all(|k| wider.contains(k)));
        }

        #[test]
        fn extent_height_is_gated(
            zs in prop::collection::vec(-3.0f64..2.0, 1..40),
            cx in 5.0f64..60.0, cy in -20.0f64..20.0,
        ) {
            let p = RecoveryParams::default();
            let pts: Vec<_> = zs.iter().enumerate().map(|(i, &z)| (cx + (i % 5) as f64 * 0.1, cy, z)).collect();
            let fp = OrientedBevBox::new(cx + 0.2, cy, 1.0, 1.0, 0.0).unwrap();
            let e = estimate_extent(&cloud(&pts), &fp, &p).unwrap();
            let h = e.height();
            prop_assert!((p.h_min..=p.h_max).contains(&h) || (h - p.h_default).abs() < 1e-9);
            if e.used_prior {
                prop_assert!((h - p.h_default).abs() < 1e-9);
            }
        }

        #[test]
        fn dilation_grows_bottom_query(
            pts in prop::collection::vec((0.0f64..60.0, -20.0f64..20.0, -2.0f64..0.0), 0..200),
            d1 in 0.0f64..80.0, d2 in 0.0f64..80.0,
        ) {
            let c = cloud(&pts);
            let poly = OrientedBevBox::new(25.0, 0.0, 2.0, 4.0, 0.3).unwrap().polygon();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let small = points_in_polygon(&c, &dilate_polygon(&poly, lo, 2.5, 80.0));
            let big = points_in_polygon(&c, &dilate_polygon(&poly, hi, 2.5, 80.0));
            prop_assert!(small.len() <= big.len());
        }

        #[test]
        fn containment_matches_half_planes(
            pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 0..200),
            w in 0.5f64..3.0, l in 0.5f64..3.0, yaw in -3.14f64..3.14,
        ) {
            let b = OrientedBevBox::new(0.0, 0.0, w, l, yaw).unwrap();
            let (s, cth) = yaw.sin_cos();
            let c = cloud(&pts.iter().map(|&(x, y)| (x, y, x + y)).collect::<Vec<_>>());
            let expected: Vec<f64> = pts.iter().filter(|&&(x, y)| {
                // project onto the box axes
                let along = cth * x + s * y;
                let across = -s * x + cth * y;
                along.abs() <= l / 2.0 + 1e-9 && across.abs() <= w / 2.0 + 1e-9
            }).map(|&(x, y)| x + y).collect();
            let got = points_in_polygon(&c, &b.polygon());
            prop_assert_eq!(got, expected);
        }
    }
}
