//! KITTI-style evaluation: difficulty assignment, greedy matching and
//! 40-point interpolated average precision in BEV and 3D.
//!
//! Boxes are compared in the rectified camera frame, so no calibration is
//! needed: BEV footprints live in the camera `x`-`z` plane and the vertical
//! extent is `[y - h, y]` (camera `y` points down).

mod plot;
mod report;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::class::{LabelClass, ObjectClass};
use crate::geometry::{iou_3d, rotated_iou, score_order, Box3D, OrientedBevBox};
use crate::kitti_io::{KittiError, KittiLabel};

pub use plot::render_pr_png;
pub use report::{evaluate, list_frames, load_frames, pr_csv, ApCell, EvalReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Kitti(#[from] KittiError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("detection and ground-truth frame sets differ ({} missing, {} unexpected)", missing.len(), extra.len())]
    FrameSetMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("no ground truth for {0}")]
    NoGroundTruth(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("plot: {0}")]
    Plot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Space {
    Bev,
    ThreeD,
}

impl Space {
    pub const ALL: [Space; 2] = [Space::Bev, Space::ThreeD];

    pub fn name(self) -> &'static str {
        match self {
            Space::Bev => "bev",
            Space::ThreeD => "3d",
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Recall sample positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RecallMode {
    /// `{0, 1/(n-1), ..., 1}`
    #[default]
    #[serde(rename = "inclusive-40")]
    Inclusive,
    /// `{1/n, 2/n, ..., 1}`, as in the official devkit.
    #[serde(rename = "devkit-40")]
    Devkit,
}

impl RecallMode {
    pub fn name(self) -> &'static str {
        match self {
            RecallMode::Inclusive => "inclusive-40",
            RecallMode::Devkit => "devkit-40",
        }
    }
}

pub fn recall_grid(mode: RecallMode, n: usize) -> Vec<f64> {
    match mode {
        RecallMode::Inclusive if n == 1 => vec![0.0],
        RecallMode::Inclusive => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        RecallMode::Devkit => (1..=n).map(|i| i as f64 / n as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyRule {
    pub min_height_px: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IouThresholds {
    pub car: f64,
    pub pedestrian: f64,
    pub cyclist: f64,
}

impl Default for IouThresholds {
    fn default() -> Self {
        IouThresholds { car: 0.7, pedestrian: 0.5, cyclist: 0.5 }
    }
}

impl IouThresholds {
    pub fn get(&self, class: ObjectClass) -> f64 {
        match class {
            ObjectClass::Car => self.car,
            ObjectClass::Pedestrian => self.pedestrian,
            ObjectClass::Cyclist => self.cyclist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: IouThresholds,
    pub recall_points: usize,
    pub recall_mode: RecallMode,
    pub easy: DifficultyRule,
    pub moderate: DifficultyRule,
    pub hard: DifficultyRule,
    /// `[min, max)` ranges of ground-plane distance; empty disables banding.
    pub distance_bands: Vec<[f64; 2]>,
    /// Treat Van / Person_sitting ground truth as ignored for Car /
    /// Pedestrian, as the official devkit does.
    pub similar_class_ignore: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: IouThresholds::default(),
            recall_points: 40,
            recall_mode: RecallMode::Inclusive,
            easy: DifficultyRule { min_height_px: 40.0, max_occlusion: 0, max_truncation: 0.15 },
            moderate: DifficultyRule { min_height_px: 25.0, max_occlusion: 1, max_truncation: 0.30 },
            hard: DifficultyRule { min_height_px: 25.0, max_occlusion: 2, max_truncation: 0.50 },
            distance_bands: (0..7).map(|i| [10.0 * i as f64, 10.0 * (i + 1) as f64]).collect(),
            similar_class_ignore: false,
        }
    }
}

impl EvalConfig {
    pub fn rule(&self, d: Difficulty) -> &DifficultyRule {
        match d {
            Difficulty::Easy => &self.easy,
            Difficulty::Moderate => &self.moderate,
            Difficulty::Hard => &self.hard,
        }
    }

    pub fn recall_grid(&self) -> Vec<f64> {
        recall_grid(self.recall_mode, self.recall_points)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let t = &self.iou_thresholds;
        if [t.car, t.pedestrian, t.cyclist].iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(EvalError::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if self.recall_points == 0 {
            return Err(EvalError::Config("recall_points must be positive".into()));
        }
        let (e, m, h) = (&self.easy, &self.moderate, &self.hard);
        let monotone = e.min_height_px >= m.min_height_px
            && m.min_height_px >= h.min_height_px
            && e.max_occlusion <= m.max_occlusion
            && m.max_occlusion <= h.max_occlusion
            && e.max_truncation <= m.max_truncation
            && m.max_truncation <= h.max_truncation;
        if !monotone {
            return Err(EvalError::Config("difficulty rules must loosen from easy to hard".into()));
        }
        if self.distance_bands.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(EvalError::Config("distance bands need min < max".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let cfg: EvalConfig = toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Difficulty levels a ground-truth label qualifies for.
pub fn assign_difficulty(label: &KittiLabel, cfg: &EvalConfig) -> Vec<Difficulty> {
    Difficulty::ALL
        .into_iter()
        .filter(|&d| {
            let r = cfg.rule(d);
            label.bbox_height() >= r.min_height_px
                && label.occlusion >= 0
                && label.occlusion <= r.max_occlusion
                && label.truncation <= r.max_truncation
        })
        .collect()
}

/// Footprint in the camera `x`-`z` plane, or `None` for placeholder
/// geometry such as DontCare regions.
pub fn label_footprint(label: &KittiLabel) -> Option<OrientedBevBox> {
    let [_, w, l] = label.dimensions;
    OrientedBevBox::new(label.location[0], label.location[2], w, l, -label.rotation_y).ok()
}

/// 3D box with the vertical axis flipped to point up.
pub fn label_box3d(label: &KittiLabel) -> Option<Box3D> {
    let h = label.dimensions[0];
    if !(h > 0.0) {
        return None;
    }
    let footprint = label_footprint(label)?;
    Some(Box3D { footprint, z_bottom: -label.location[1], z_top: -label.location[1] + h })
}

/// Geometry of one label prepared for a given space.
#[derive(Debug, Clone, Copy)]
enum Shape {
    Bev(OrientedBevBox),
    Box(Box3D),
}

fn shape(label: &KittiLabel, space: Space) -> Option<Shape> {
    match space {
        Space::Bev => label_footprint(label).map(Shape::Bev),
        Space::ThreeD => label_box3d(label).map(Shape::Box),
    }
}

fn iou(a: &Shape, b: &Shape) -> f64 {
    match (a, b) {
        (Shape::Bev(a), Shape::Bev(b)) => rotated_iou(a, b),
        (Shape::Box(a), Shape::Box(b)) => iou_3d(a, b),
        _ => 0.0,
    }
}

/// Role of a ground-truth object in one evaluation cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtRole {
    /// Counts towards recall.
    Valid,
    /// May absorb one detection, which is then neither TP nor FP.
    Ignored,
    /// Absorbs any number of overlapping detections.
    DontCare,
}

/// Outcome of one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetOutcome {
    Tp,
    Fp,
    Ignored,
}

/// Greedy matching of one frame. `dets` are visited in descending score
/// order (ties by index); each takes the unmatched valid ground truth of
/// highest IoU at or above `thresh`, else an unmatched ignored one, else is
/// absorbed by a DontCare region, else is a false positive.
/// `iou(d, g)` gives the overlap of detection `d` and ground truth `g`.
pub fn match_frame(
    scores: &[f64],
    roles: &[GtRole],
    iou: impl Fn(usize, usize) -> f64,
    thresh: f64,
) -> Vec<DetOutcome> {
    let mut taken = vec![false; roles.len()];
    let mut out = vec![DetOutcome::Fp; scores.len()];
    for d in score_order(scores.iter().copied()) {
        let best = |role: GtRole, taken: &[bool]| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &r) in roles.iter().enumerate() {
                if r != role || (role != GtRole::DontCare && taken[g]) {
                    continue;
                }
                let o = iou(d, g);
                if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            best.map(|(g, _)| g)
        };
        if let Some(g) = best(GtRole::Valid, &taken) {
            taken[g] = true;
            out[d] = DetOutcome::Tp;
        } else if let Some(g) = best(GtRole::Ignored, &taken) {
            taken[g] = true;
            out[d] = DetOutcome::Ignored;
        } else if best(GtRole::DontCare, &taken).is_some() {
            out[d] = DetOutcome::Ignored;
        }
    }
    out
}

/// One evaluation cell: which ground truth counts and which space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub class: ObjectClass,
    pub difficulty: Difficulty,
    pub space: Space,
    /// `[min, max)` on ground-plane range; ground truth outside is ignored and
    /// unmatched detections outside are dropped.
    pub band: Option<[f64; 2]>,
}

/// Ground truth and detections of one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameData {
    pub id: String,
    pub gt: Vec<KittiLabel>,
    pub dets: Vec<KittiLabel>,
}

fn in_band(label: &KittiLabel, band: Option<[f64; 2]>) -> bool {
    band.is_none_or(|[lo, hi]| (lo..hi).contains(&label.ground_range()))
}

fn gt_role(label: &KittiLabel, cell: &CellSpec, cfg: &EvalConfig) -> Option<GtRole> {
    match &label.class {
        LabelClass::DontCare => Some(GtRole::DontCare),
        LabelClass::Known(c) if *c == cell.class => {
            if assign_difficulty(label, cfg).contains(&cell.difficulty) && in_band(label, cell.band) {
                Some(GtRole::Valid)
            } else {
                Some(GtRole::Ignored)
            }
        }
        LabelClass::Other(name) if cfg.similar_class_ignore && name == cell.class.similar_label() => {
            Some(GtRole::Ignored)
        }
        _ => None,
    }
}

/// Scored TP/FP outcomes of one cell over a frame, plus its valid count.
pub fn frame_outcomes(frame: &FrameData, cell: &CellSpec, cfg: &EvalConfig) -> (Vec<(f64, bool)>, usize) {
    let mut gts = Vec::new();
    let mut roles = Vec::new();
    for g in &frame.gt {
        if let Some(role) = gt_role(g, cell, cfg) {
            gts.push((g, shape(g, cell.space)));
            roles.push(role);
        }
    }
    let n_valid = roles.iter().filter(|r| **r == GtRole::Valid).count();
    let dets: Vec<(&KittiLabel, Option<Shape>)> = frame
        .dets
        .iter()
        .filter(|d| d.class.known() == Some(cell.class))
        .map(|d| (d, shape(d, cell.space)))
        .collect();
    let scores: Vec<f64> = dets.iter().map(|(d, _)| d.score.unwrap_or(1.0)).collect();
    let overlap = |d: usize, g: usize| match (&dets[d].1, &gts[g].1) {
        (Some(a), Some(b)) => iou(a, b),
        _ => 0.0,
    };
    let outcomes = match_frame(&scores, &roles, overlap, cfg.iou_thresholds.get(cell.class));
    let scored = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| match o {
            DetOutcome::Tp => Some((scores[i], true)),
            DetOutcome::Fp if in_band(dets[i].0, cell.band) => Some((scores[i], false)),
            _ => None,
        })
        .collect();
    (scored, n_valid)
}

/// One operating point of the score sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub n_gt: usize,
    /// One point per distinct score, in descending score order.
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// Sweeps every distinct score of the `(score, is_tp)` list as a
    /// threshold, keeping detections with `score >= threshold`.
    pub fn from_outcomes(outcomes: &[(f64, bool)], n_gt: usize) -> PrCurve {
        let order = score_order(outcomes.iter().map(|o| o.0));
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (k, &i) in order.iter().enumerate() {
            let (score, hit) = outcomes[i];
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            let last_of_group = order.get(k + 1).is_none_or(|&j| outcomes[j].0 != score);
            if last_of_group {
                points.push(PrPoint {
                    threshold: score,
                    tp,
                    fp,
                    recall: if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 },
                    precision: tp as f64 / (tp + fp) as f64,
                });
            }
        }
        PrCurve { n_gt, points }
    }

    /// `max { precision(p) : recall(p) >= r }`, zero when no point reaches `r`.
    pub fn interpolated_precision(&self, r: f64) -> f64 {
        self.points.iter().filter(|p| p.recall >= r).map(|p| p.precision).fold(0.0, f64::max)
    }

    /// Mean interpolated precision over `grid`; `None` without ground truth.
    pub fn average_precision(&self, grid: &[f64]) -> Option<f64> {
        if self.n_gt == 0 {
            return None;
        }
        Some(grid.iter().map(|&r| self.interpolated_precision(r)).sum::<f64>() / grid.len() as f64)
    }
}

/// PR curve of one cell over all frames.
pub fn pr_curve(frames: &[FrameData], cell: &CellSpec, cfg: &EvalConfig) -> PrCurve {
    let mut all = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        let (o, n) = frame_outcomes(f, cell, cfg);
        all.extend(o);
        n_gt += n;
    }
    PrCurve::from_outcomes(&all, n_gt)
}

/// AP over the configured recall grid.
pub fn ap40(frames: &[FrameData], cell: &CellSpec, cfg: &EvalConfig) -> Result<f64, EvalError> {
    pr_curve(frames, cell, cfg).average_precision(&cfg.recall_grid()).ok_or_else(|| {
        EvalError::NoGroundTruth(format!("{} {} {}", cell.class, cell.difficulty, cell.space))
    })
}
