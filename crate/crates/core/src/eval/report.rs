//! Directory-level evaluation and report rendering.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::plot::render_pr_png;
use super::{pr_curve, CellSpec, Difficulty, EvalConfig, EvalError, FrameData, PrCurve, RecallMode, Space};
use crate::class::ObjectClass;
use crate::kitti_io::read_labels;

fn io_err(path: &Path, e: std::io::Error) -> EvalError {
    EvalError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Sorted frame ids (`*.txt` stems) in `dir`.
pub fn list_frames(dir: &Path) -> Result<Vec<String>, EvalError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Pairs ground-truth and detection files by frame id. An empty detection
/// directory means "no detections anywhere"; otherwise both sets must match.
pub fn load_frames(det_dir: &Path, gt_dir: &Path) -> Result<Vec<FrameData>, EvalError> {
    let gt_ids = list_frames(gt_dir)?;
    let det_ids = list_frames(det_dir)?;
    if !det_ids.is_empty() && det_ids != gt_ids {
        let g: BTreeSet<_> = gt_ids.iter().collect();
        let d: BTreeSet<_> = det_ids.iter().collect();
        return Err(EvalError::FrameSetMismatch {
            missing: g.difference(&d).map(|s| s.to_string()).collect(),
            extra: d.difference(&g).map(|s| s.to_string()).collect(),
        });
    }
    gt_ids
        .into_iter()
        .map(|id| {
            let gt = read_labels(gt_dir.join(format!("{id}.txt")))?;
            let dets =
                if det_ids.is_empty() { Vec::new() } else { read_labels(det_dir.join(format!("{id}.txt")))? };
            Ok(FrameData { id, gt, dets })
        })
        .collect()
}

/// AP of one evaluation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ApCell {
    pub spec: CellSpec,
    pub n_gt: usize,
    /// `None` when the cell has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: RecallMode,
    pub recall_grid: Vec<f64>,
    pub cells: Vec<ApCell>,
    /// Curves of the unbanded cells, in `cells` order.
    pub curves: Vec<(CellSpec, PrCurve)>,
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v))
}

fn band_label(band: Option<[f64; 2]>) -> String {
    band.map_or_else(|| "all".to_string(), |[lo, hi]| format!("{lo}-{hi}m"))
}

impl EvalReport {
    pub fn from_frames(frames: &[FrameData], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
        cfg.validate()?;
        let grid = cfg.recall_grid();
        let bands: Vec<Option<[f64; 2]>> =
            std::iter::once(None).chain(cfg.distance_bands.iter().copied().map(Some)).collect();
        let mut cells = Vec::new();
        let mut curves = Vec::new();
        for class in ObjectClass::ALL {
            for space in Space::ALL {
                for difficulty in Difficulty::ALL {
                    for &band in &bands {
                        let spec = CellSpec { class, difficulty, space, band };
                        let curve = pr_curve(frames, &spec, cfg);
                        cells.push(ApCell { spec, n_gt: curve.n_gt, ap: curve.average_precision(&grid) });
                        if band.is_none() {
                            curves.push((spec, curve));
                        }
                    }
                }
            }
        }
        Ok(EvalReport { mode: cfg.recall_mode, recall_grid: grid, cells, curves })
    }

    pub fn get(&self, class: ObjectClass, difficulty: Difficulty, space: Space, band: Option<[f64; 2]>) -> Option<&ApCell> {
        self.cells.iter().find(|c| {
            c.spec.class == class && c.spec.difficulty == difficulty && c.spec.space == space && c.spec.band == band
        })
    }

    /// Mean of the defined unbanded easy / moderate / hard APs.
    pub fn map(&self, class: ObjectClass, space: Space) -> Option<f64> {
        let aps: Vec<f64> =
            Difficulty::ALL.iter().filter_map(|&d| self.get(class, d, space, None).and_then(|c| c.ap)).collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    }

    /// Aligned text table: the overall block, then one row per banded cell
    /// set.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "recall mode: {} ({} points)", self.mode.name(), self.recall_grid.len());
        let _ = writeln!(s, "{:<11} {:<5} {:>8} {:>8} {:>8} {:>8}", "class", "space", "easy", "moderate", "hard", "mAP");
        for class in ObjectClass::ALL {
            for space in Space::ALL {
                let ap = |d| fmt_ap(self.get(class, d, space, None).and_then(|c| c.ap));
                let _ = writeln!(
                    s,
                    "{:<11} {:<5} {:>8} {:>8} {:>8} {:>8}",
                    class.name(),
                    space.name(),
                    ap(Difficulty::Easy),
                    ap(Difficulty::Moderate),
                    ap(Difficulty::Hard),
                    fmt_ap(self.map(class, space))
                );
            }
        }
        let bands: Vec<[f64; 2]> = {
            let mut seen = Vec::new();
            for c in &self.cells {
                if let Some(b) = c.spec.band {
                    if !seen.contains(&b) {
                        seen.push(b);
                    }
                }
            }
            seen
        };
        if !bands.is_empty() {
            let _ = writeln!(s);
            let _ = write!(s, "{:<11} {:<5} {:<8}", "class", "space", "level");
            for b in &bands {
                let _ = write!(s, " {:>8}", band_label(Some(*b)));
            }
            let _ = writeln!(s);
            for class in ObjectClass::ALL {
                for space in Space::ALL {
                    for d in Difficulty::ALL {
                        let _ = write!(s, "{:<11} {:<5} {:<8}", class.name(), space.name(), d.name());
                        for b in &bands {
                            let _ = write!(s, " {:>8}", fmt_ap(self.get(class, d, space, Some(*b)).and_then(|c| c.ap)));
                        }
                        let _ = writeln!(s);
                    }
                }
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,class,difficulty,space,band,n_gt,ap\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.mode.name(),
                c.spec.class.name(),
                c.spec.difficulty.name(),
                c.spec.space.name(),
                band_label(c.spec.band),
                c.n_gt,
                c.ap.map_or(String::new(), |v| format!("{v:.6}"))
            );
        }
        s
    }

    /// Writes `report.txt`, `report.csv` and, for every unbanded cell with
    /// ground truth, `pr/<class>_<difficulty>_<space>.{csv,png}`.
    pub fn write(&self, out_dir: &Path) -> Result<(), EvalError> {
        let pr_dir = out_dir.join("pr");
        fs::create_dir_all(&pr_dir).map_err(|e| io_err(&pr_dir, e))?;
        let write = |p: &Path, text: &str| fs::write(p, text).map_err(|e| io_err(p, e));
        write(&out_dir.join("report.txt"), &self.to_table())?;
        write(&out_dir.join("report.csv"), &self.to_csv())?;
        for (spec, curve) in &self.curves {
            if curve.n_gt == 0 {
                continue;
            }
            let stem = format!("{}_{}_{}", spec.class.name(), spec.difficulty.name(), spec.space.name());
            write(&pr_dir.join(format!("{stem}.csv")), &pr_csv(curve))?;
            render_pr_png(curve, &self.recall_grid, &pr_dir.join(format!("{stem}.png")))?;
        }
        Ok(())
    }
}

pub fn pr_csv(curve: &PrCurve) -> String {
    let mut s = String::from("threshold,tp,fp,recall,precision\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6}", p.threshold, p.tp, p.fp, p.recall, p.precision);
    }
    s
}

/// Loads both directories and evaluates every class, difficulty, space and
/// distance band.
pub fn evaluate(det_dir: &Path, gt_dir: &Path, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let frames = load_frames(det_dir, gt_dir)?;
    EvalReport::from_frames(&frames, cfg)
}
