//! Per-level prediction head and box decoding.
//!
//! Prediction channels, in order: `4 x dfl_bins` side logits (left, top,
//! right, bottom), `n_classes` class logits, `n_angle_bins` yaw logits and
//! one objectness logit.

use std::f64::consts::PI;

use super::conv::Conv;
use super::model::FusedLevel;
use super::params::{join, Module, Param};
use super::tensor::{sigmoid, softmax};
use super::{Activation, DecodedDetection, FeatureMap, Level, NetConfig, NetError, PixelBox};
use crate::class::ObjectClass;
use crate::geometry::score_order;

#[derive(Debug, Clone)]
pub struct Head {
    pub stem: Conv,
    pub pred: Conv,
}

impl Head {
    pub fn new(c: usize, cfg: &NetConfig) -> Self {
        Head {
            stem: Conv::new(c, c, 3, 1, cfg.activation),
            pred: Conv::new(c, cfg.head_outputs(), 1, 1, Activation::Identity),
        }
    }

    pub fn forward(&self, f: &FusedLevel) -> Result<LevelOutput, NetError> {
        Ok(LevelOutput { level: f.level, map: self.pred.forward(&self.stem.forward(&f.map)?)? })
    }
}

impl Module for Head {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.pred.visit(&join(prefix, "pred"), f);
    }
}

/// Raw predictions of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput {
    pub level: Level,
    pub map: FeatureMap,
}

/// Expected bin index under the softmax of `logits`.
pub fn dfl_expectation(logits: &[f64]) -> f64 {
    softmax(logits).iter().enumerate().map(|(k, p)| k as f64 * p).sum()
}

/// Yaw bin centres `-pi + (k + 0.5) * 2pi / n`.
pub fn yaw_bin_centers(n: usize) -> Vec<f64> {
    (0..n).map(|k| -PI + (k as f64 + 0.5) * 2.0 * PI / n as f64).collect()
}

/// Decodes every cell of one level into candidates, keeping those with
/// `score >= cfg.score_threshold` whose centre lies inside the unpadded
/// `valid_w x valid_h` input, best `cfg.max_candidates` first.
pub fn decode_level(
    out: &LevelOutput,
    cfg: &NetConfig,
    valid_w: usize,
    valid_h: usize,
) -> Result<Vec<DecodedDetection>, NetError> {
    let map = &out.map;
    if map.c != cfg.head_outputs() {
        return Err(NetError::ShapeMismatch(format!(
            "head map has {} channels, config expects {}",
            map.c,
            cfg.head_outputs()
        )));
    }
    let bins = cfg.dfl_bins;
    let cls0 = 4 * bins;
    let ang0 = cls0 + cfg.n_classes;
    let obj = ang0 + cfg.n_angle_bins;
    let stride = out.level.stride() as f64;
    let centers = yaw_bin_centers(cfg.n_angle_bins);

    let mut dets = Vec::new();
    for y in 0..map.h {
        for x in 0..map.w {
            let (best_class, best_logit) = (0..cfg.n_classes)
                .map(|k| (k, map.at(cls0 + k, y, x) as f64))
                .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
            let score = sigmoid(map.at(obj, y, x) as f64) * sigmoid(best_logit);
            if score < cfg.score_threshold {
                continue;
            }
            let side = |s: usize| {
                let logits: Vec<f64> = (0..bins).map(|k| map.at(s * bins + k, y, x) as f64).collect();
                dfl_expectation(&logits) * stride
            };
            let (l, t, r, b) = (side(0), side(1), side(2), side(3));
            let ang: Vec<f64> = (0..cfg.n_angle_bins).map(|k| map.at(ang0 + k, y, x) as f64).collect();
            let yaw: f64 = softmax(&ang).iter().zip(&centers).map(|(p, c)| p * c).sum();

            let (du, dv) = ((r - l) / 2.0, (b - t) / 2.0);
            let (sin, cos) = yaw.sin_cos();
            let cu = (x as f64 + 0.5) * stride + cos * du - sin * dv;
            let cv = (y as f64 + 0.5) * stride + sin * du + cos * dv;
            let (length, width) = (l + r, t + b);
            if !(length > 0.0 && width > 0.0) {
                continue;
            }
            if !(0.0..valid_w as f64).contains(&cu) || !(0.0..valid_h as f64).contains(&cv) {
                continue;
            }
            let Some(class) = ObjectClass::from_index(best_class) else {
                continue;
            };
            dets.push(DecodedDetection {
                bbox: PixelBox { cu, cv, length, width, yaw },
                class,
                score,
                stride: out.level.stride(),
            });
        }
    }
    let order = score_order(dets.iter().map(|d| d.score));
    Ok(order.into_iter().take(cfg.max_candidates).map(|i| dets[i]).collect())
}
