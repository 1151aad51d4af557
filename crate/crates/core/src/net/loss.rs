//! Loss value functions over already matched prediction/target pairs.

use super::tensor::softmax;
use super::{NetConfig, NetError};
use crate::geometry::{rotated_iou, OrientedBevBox};

/// `(box, dfl, cls)` weights of the total loss.
pub const LOSS_WEIGHTS: (f64, f64, f64) = (7.5, 1.5, 0.5);

/// One prediction paired with its target.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub pred_box: OrientedBevBox,
    pub target_box: OrientedBevBox,
    /// `4 x dfl_bins` logits, side-major.
    pub side_logits: Vec<f64>,
    /// Continuous side distances in bin units, each in `[0, dfl_bins - 1]`.
    pub side_targets: [f64; 4],
    pub class_logits: Vec<f64>,
    pub class_target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_box: f64,
    pub l_dfl: f64,
    pub l_cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_parts(l_box: f64, l_dfl: f64, l_cls: f64) -> Self {
        let (wb, wd, wc) = LOSS_WEIGHTS;
        LossBreakdown { l_box, l_dfl, l_cls, total: wb * l_box + wd * l_dfl + wc * l_cls }
    }
}

/// Cross-entropy against the two bins adjacent to `target`, weighted by
/// linear proximity.
pub fn dfl_loss(logits: &[f64], target: f64) -> f64 {
    let n = logits.len();
    let lo = (target.floor() as usize).min(n - 2);
    let hi = lo + 1;
    let p = softmax(logits);
    -((hi as f64 - target) * p[lo].ln() + (target - lo as f64) * p[hi].ln())
}

/// `-[t ln s(z) + (1 - t) ln(1 - s(z))]`, evaluated stably.
fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub fn loss_values(pairs: &[MatchedPair], cfg: &NetConfig) -> Result<LossBreakdown, NetError> {
    if pairs.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let bins = cfg.dfl_bins;
    let (mut l_box, mut l_dfl, mut l_cls) = (0.0, 0.0, 0.0);
    for (i, p) in pairs.iter().enumerate() {
        if p.side_logits.len() != 4 * bins || p.class_logits.len() != cfg.n_classes {
            return Err(NetError::ShapeMismatch(format!(
                "pair {i}: {} side logits and {} class logits, expected {} and {}",
                p.side_logits.len(),
                p.class_logits.len(),
                4 * bins,
                cfg.n_classes
            )));
        }
        if p.class_target >= cfg.n_classes
            || p.side_targets.iter().any(|t| !(0.0..=(bins - 1) as f64).contains(t))
        {
            return Err(NetError::ShapeMismatch(format!("pair {i}: target outside the bin or class range")));
        }
        l_box += 1.0 - rotated_iou(&p.pred_box, &p.target_box);
        l_dfl += (0..4).map(|s| dfl_loss(&p.side_logits[s * bins..(s + 1) * bins], p.side_targets[s])).sum::<f64>() / 4.0;
        l_cls += p
            .class_logits
            .iter()
            .enumerate()
            .map(|(k, &z)| bce_with_logits(z, if k == p.class_target { 1.0 } else { 0.0 }))
            .sum::<f64>()
            / cfg.n_classes as f64;
    }
    let n = pairs.len() as f64;
    Ok(LossBreakdown::from_parts(l_box / n, l_dfl / n, l_cls / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::sigmoid;

    fn bx(cx: f64, cy: f64, w: f64, l: f64, yaw: f64) -> OrientedBevBox {
        OrientedBevBox::new(cx, cy, w, l, yaw).unwrap()
    }

    fn pair(pred: OrientedBevBox, target: OrientedBevBox) -> MatchedPair {
        MatchedPair {
            pred_box: pred,
            target_box: target,
            side_logits: (0..64).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect(),
            side_targets: [2.3, 7.0, 0.4, 14.6],
            class_logits: vec![0.7, -1.2, 0.1],
            class_target: 0,
        }
    }

    fn total(p: &MatchedPair) -> f64 {
        loss_values(std::slice::from_ref(p), &NetConfig::default()).unwrap().total
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn weighted_sum_spot_check() {
        assert_eq!(LossBreakdown::from_parts(1.0, 1.0, 1.0).total, 9.5);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let b = bx(10.0, 2.0, 1.6, 4.0, 0.3);
        let mut logits = vec![-40.0; 64];
        let targets = [3.0, 5.0, 0.0, 15.0];
        for (s, t) in targets.iter().enumerate() {
            logits[s * 16 + *t as usize] = 40.0;
        }
        let p = MatchedPair {
            pred_box: b,
            target_box: b,
            side_logits: logits,
            side_targets: targets,
            class_logits: vec![-40.0, 40.0, -40.0],
            class_target: 1,
        };
        let l = loss_values(&[p], &NetConfig::default()).unwrap();
        assert!(l.l_box.abs() < 1e-9);
        assert!(l.l_dfl < 1e-3 && l.l_dfl >= 0.0);
        assert!(l.l_cls < 1e-3);
    }

    #[test]
    fn disjoint_boxes_cost_one() {
        let p = pair(bx(0.0, 0.0, 1.0, 1.0, 0.0), bx(5.0, 5.0, 1.0, 1.0, 0.2));
        assert_eq!(loss_values(&[p], &NetConfig::default()).unwrap().l_box, 1.0);
    }

    #[test]
    fn errors() {
        let cfg = NetConfig::default();
        assert_eq!(loss_values(&[], &cfg), Err(NetError::EmptyBatch));
        let mut p = pair(bx(0.0, 0.0, 1.0, 1.0, 0.0), bx(0.0, 0.0, 1.0, 1.0, 0.0));
        p.class_logits.pop();
        assert!(matches!(loss_values(&[p.clone()], &cfg), Err(NetError::ShapeMismatch(_))));
        p.class_logits.push(0.0);
        p.side_targets[0] = 15.5;
        assert!(matches!(loss_values(&[p], &cfg), Err(NetError::ShapeMismatch(_))));
    }

    #[test]
    fn box_gradient_matches_axis_aligned_derivative() {
        // pred [-2, 2] x [-1, 1], target [-1, 3] x [-0.5, 1.5]; moving the
        // pred right grows the x overlap one-for-one.
        let target = bx(1.0, 0.5, 2.0, 4.0, 0.0);
        let at = |cx: f64| pair(bx(cx, 0.0, 2.0, 4.0, 0.0), target);
        let (ox, oy) = (3.0, 1.5);
        let inter = ox * oy;
        let sum = 8.0 + 8.0;
        let union = sum - inter;
        let analytic = LOSS_WEIGHTS.0 * -(sum / (union * union)) * oy;
        let h = 1e-6;
        let numeric = (total(&at(h)) - total(&at(-h))) / (2.0 * h);
        assert!(rel_err(analytic, numeric) < 1e-3, "{analytic} vs {numeric}");
    }

    #[test]
    fn dfl_and_cls_gradients_match_softmax_and_sigmoid_forms() {
        let b = bx(0.0, 0.0, 2.0, 4.0, 0.0);
        let base = pair(b, b);
        let p = softmax(&base.side_logits[0..16]);
        // side 0 target 2.3 splits 0.7 / 0.3 over bins 2 and 3
        let mut tgt = [0.0; 16];
        tgt[2] = 0.7;
        tgt[3] = 0.3;
        let h = 1e-6;
        for k in [0, 2, 3, 9] {
            let analytic = LOSS_WEIGHTS.1 * (p[k] - tgt[k]) / 4.0;
            let (mut up, mut down) = (base.clone(), base.clone());
            up.side_logits[k] += h;
            down.side_logits[k] -= h;
            let numeric = (total(&up) - total(&down)) / (2.0 * h);
            assert!(rel_err(analytic, numeric) < 1e-3, "bin {k}: {analytic} vs {numeric}");
        }
        for k in 0..3 {
            let t = if k == 0 { 1.0 } else { 0.0 };
            let analytic = LOSS_WEIGHTS.2 * (sigmoid(base.class_logits[k]) - t) / 3.0;
            let (mut up, mut down) = (base.clone(), base.clone());
            up.class_logits[k] += h;
            down.class_logits[k] -= h;
            let numeric = (total(&up) - total(&down)) / (2.0 * h);
            assert!(rel_err(analytic, numeric) < 1e-3, "class {k}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn dfl_edge_bin() {
        let mut logits = vec![0.0; 16];
        logits[15] = 50.0;
        assert!(dfl_loss(&logits, 15.0) < 1e-9);
        assert!(dfl_loss(&logits, 14.0) > 10.0);
    }
}
