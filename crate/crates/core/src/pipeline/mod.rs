//! Directory-level stages: encode, augment, infer, recover, eval and a
//! per-stage timing report.
//!
//! Frames are processed independently on a worker pool. Every per-frame
//! output depends only on the frame and the config, and summaries are sorted
//! by frame id, so output trees do not depend on the worker count. A frame
//! that fails is logged and listed in `summary.json`; the run continues.

mod sidecar;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_frame, rebin_shift, AugmentParams, MULTI_OFFSETS};
use crate::bev::{encode, render_png, BevError, BevImage, GridConfig};
use crate::class::ObjectClass;
use crate::eval::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::geometry::{nms_rotated_indices, OrientedBevBox, ScoredBox};
use crate::kitti_io::{read_calib, read_velodyne, write_detections, Calibration, KittiError, PointCloud};
use crate::net::{DecodedDetection, Detector, NetConfig, NetError, PixelBox, WeightFile};
use crate::recovery::{recover, Recovered, RecoveryParams};

pub use sidecar::{parse_sidecar, read_sidecar, sidecar_bytes, write_sidecar, SIDECAR_MAGIC};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Kitti(#[from] KittiError),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("bad tensor sidecar: {0}")]
    Sidecar(String),
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("bad BEV detection file, line {line}: {message}")]
    BevDetections { line: usize, message: String },
}

impl PipelineError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridConfig,
    pub augment: AugmentParams,
    pub net: NetConfig,
    pub recovery: RecoveryParams,
    pub eval: EvalConfig,
    /// IoU above which a lower-scored candidate of the same class is dropped.
    pub nms_iou: f64,
    /// Decode encodings at every vertical offset and merge them with NMS.
    pub multi_offset: bool,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    /// Seed and gain of the random weights used when no weight file is given.
    pub init_seed: u64,
    pub init_gain: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid: GridConfig::default(),
            augment: AugmentParams::default(),
            net: NetConfig::default(),
            recovery: RecoveryParams::default(),
            eval: EvalConfig::default(),
            nms_iou: 0.5,
            multi_offset: false,
            workers: 0,
            init_seed: 0,
            init_gain: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.grid.validate()?;
        self.augment.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.net.validate()?;
        self.recovery.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.eval.validate()?;
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(PipelineError::Config(format!("nms_iou must be in [0, 1], got {}", self.nms_iou)));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(PipelineError::Config("init_gain must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameFailure {
    pub id: String,
    pub error: String,
}

/// Machine-readable outcome of one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub frames: usize,
    pub succeeded: Vec<String>,
    pub failed: Vec<FrameFailure>,
}

impl StageSummary {
    fn from_results(stage: &str, results: Vec<(String, Result<(), PipelineError>)>) -> Self {
        let mut s = StageSummary { stage: stage.into(), frames: results.len(), succeeded: vec![], failed: vec![] };
        for (id, r) in results {
            match r {
                Ok(()) => s.succeeded.push(id),
                Err(e) => {
                    warn!("{stage}: frame {id} failed: {e}");
                    s.failed.push(FrameFailure { id, error: e.to_string() });
                }
            }
        }
        s
    }

    pub fn is_clean(&self) -> bool {
        self.failed.is_empty()
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), PipelineError> {
        let path = out_dir.join("summary.json");
        let text = serde_json::to_string_pretty(self).expect("summary serializes") + "\n";
        fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))
    }
}

/// Sorted stems of the files with extension `ext` in `dir`.
pub fn frame_ids(dir: &Path, ext: &str) -> Result<Vec<String>, PipelineError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

/// Runs `f` on every id on a pool of `workers` threads; results keep the
/// order of `ids`.
fn run_frames<T, F>(ids: &[String], workers: usize, f: F) -> Vec<(String, Result<T, PipelineError>)>
where
    T: Send,
    F: Fn(&str) -> Result<T, PipelineError> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("thread pool");
    pool.install(|| ids.par_iter().map(|id| (id.clone(), f(id))).collect())
}

fn velodyne_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.bin"))
}

fn calibration(calib_dir: Option<&Path>, id: &str) -> Result<Calibration, PipelineError> {
    match calib_dir {
        Some(dir) => Ok(read_calib(dir.join(format!("{id}.txt")))?),
        None => Ok(Calibration::kitti_like()),
    }
}

fn write_encoding(img: &BevImage, out_dir: &Path, id: &str) -> Result<(), PipelineError> {
    render_png(img, out_dir.join(format!("{id}.png")))?;
    write_sidecar(img, &out_dir.join(format!("{id}.tbev")))
}

/// `velodyne/*.bin` to `<out>/<id>.png` and `<out>/<id>.tbev`.
pub fn encode_dir(velodyne_dir: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<StageSummary, PipelineError> {
    cfg.grid.validate()?;
    create_dir(out_dir)?;
    let ids = frame_ids(velodyne_dir, "bin")?;
    let results = run_frames(&ids, cfg.workers, |id| {
        let cloud = read_velodyne(velodyne_path(velodyne_dir, id))?;
        write_encoding(&encode(&cloud, &cfg.grid), out_dir, id)
    });
    let summary = StageSummary::from_results("encode", results);
    summary.write(out_dir)?;
    info!("encode: {} frames, {} failed", summary.frames, summary.failed.len());
    Ok(summary)
}

/// Original on the left, augmented on the right.
pub fn side_by_side(original: &BevImage, augmented: &BevImage) -> image::RgbImage {
    let (w, h) = (original.width() as u32, original.height() as u32);
    let mut out = image::RgbImage::new(2 * w, h);
    for (dx, img) in [(0, original), (w, augmented)] {
        for v in 0..h {
            for u in 0..w {
                let px = [0, 1, 2].map(|c| img.get(u as usize, v as usize, c));
                out.put_pixel(dx + u, v, image::Rgb(px));
            }
        }
    }
    out
}

/// Augmented encodings plus `draws.csv` with the per-frame `dz` and jitter.
/// With `pairs`, also `<id>_pair.png` from [`side_by_side`].
pub fn augment_dir(
    velodyne_dir: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
    pairs: bool,
) -> Result<StageSummary, PipelineError> {
    cfg.grid.validate()?;
    cfg.augment.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    create_dir(out_dir)?;
    let ids = frame_ids(velodyne_dir, "bin")?;
    let results = run_frames(&ids, cfg.workers, |id| {
        let cloud = read_velodyne(velodyne_path(velodyne_dir, id))?;
        let aug = augment_frame(&cloud, &cfg.augment.for_frame(id), &cfg.grid);
        write_encoding(&aug.image, out_dir, id)?;
        if pairs {
            let path = out_dir.join(format!("{id}_pair.png"));
            side_by_side(&encode(&cloud, &cfg.grid), &aug.image)
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| PipelineError::Io { path: path.display().to_string(), message: e.to_string() })?;
        }
        Ok((aug.dz, aug.jitter))
    });
    let mut csv = String::from("frame,dz,jitter\n");
    let mut plain = Vec::new();
    for (id, r) in results {
        match r {
            Ok((dz, j)) => {
                let _ = writeln!(csv, "{id},{dz},{j}");
                plain.push((id, Ok(())));
            }
            Err(e) => plain.push((id, Err(e))),
        }
    }
    let path = out_dir.join("draws.csv");
    fs::write(&path, csv).map_err(|e| PipelineError::io(&path, e))?;
    let summary = StageSummary::from_results("augment", plain);
    summary.write(out_dir)?;
    Ok(summary)
}

/// Model from a weight container, or seeded random weights.
pub fn load_model(weights: Option<&Path>, cfg: &PipelineConfig) -> Result<Detector, PipelineError> {
    match weights {
        Some(path) => Ok(Detector::load(&cfg.net, &WeightFile::load(path)?)?),
        None => Ok(Detector::seeded(&cfg.net, cfg.init_seed, cfg.init_gain)?),
    }
}

/// Head candidates before NMS. With `multi_offset`, the union over the
/// vertical offsets; otherwise the single encoding (`cached` if given).
pub fn candidates(
    model: &Detector,
    cloud: &PointCloud,
    cached: Option<&BevImage>,
    cfg: &PipelineConfig,
) -> Result<Vec<DecodedDetection>, PipelineError> {
    if cfg.multi_offset {
        let mut all = Vec::new();
        for dz in MULTI_OFFSETS {
            all.extend(model.detect(&encode(&rebin_shift(cloud, dz), &cfg.grid))?);
        }
        return Ok(all);
    }
    match cached {
        Some(img) => Ok(model.detect(img)?),
        None => Ok(model.detect(&encode(cloud, &cfg.grid))?),
    }
}

/// Per-class rotated NMS in metric space; survivors in descending score.
pub fn suppress(cands: &[DecodedDetection], grid: &GridConfig, iou: f64) -> Vec<DecodedDetection> {
    let valid: Vec<(DecodedDetection, OrientedBevBox)> =
        cands.iter().filter_map(|d| d.bbox.to_meters(grid).ok().map(|b| (*d, b))).collect();
    let boxes: Vec<ScoredBox> = valid.iter().map(|(d, b)| ScoredBox { bbox: *b, score: d.score, class: d.class }).collect();
    nms_rotated_indices(&boxes, iou).into_iter().map(|i| valid[i].0).collect()
}

#[derive(Debug, Clone)]
pub struct FrameInference {
    /// Post-NMS BEV detections.
    pub bev: Vec<DecodedDetection>,
    pub recovered: Recovered,
}

pub fn infer_frame(
    model: &Detector,
    cloud: &PointCloud,
    cached: Option<&BevImage>,
    calib: &Calibration,
    cfg: &PipelineConfig,
) -> Result<FrameInference, PipelineError> {
    let bev = suppress(&candidates(model, cloud, cached, cfg)?, &cfg.grid, cfg.nms_iou);
    let recovered = recover(&bev, cloud, calib, &cfg.grid, &cfg.recovery);
    Ok(FrameInference { bev, recovered })
}

/// One line per detection: `class cx cy w l yaw score` in LiDAR meters.
pub fn format_bev_detections(dets: &[DecodedDetection], grid: &GridConfig) -> String {
    let mut s = String::new();
    for d in dets {
        if let Ok(b) = d.bbox.to_meters(grid) {
            let _ = writeln!(s, "{} {} {} {} {} {} {}", d.class, b.cx, b.cy, b.w, b.l, b.yaw, d.score);
        }
    }
    s
}

pub fn parse_bev_detections(text: &str, grid: &GridConfig) -> Result<Vec<DecodedDetection>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |m: String| PipelineError::BevDetections { line: i + 1, message: m };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let class: ObjectClass = f[0].parse().map_err(|_| err(format!("unknown class `{}`", f[0])))?;
        let v = f[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("`{s}` is not a number"))))
            .collect::<Result<Vec<_>, _>>()?;
        let b = OrientedBevBox::new(v[0], v[1], v[2], v[3], v[4]).map_err(|e| err(e.to_string()))?;
        out.push(DecodedDetection { bbox: PixelBox::from_meters(&b, grid), class, score: v[5], stride: 0 });
    }
    Ok(out)
}

/// Directories an inference run reads.
#[derive(Debug, Clone, Copy)]
pub struct InferInputs<'a> {
    pub velodyne: &'a Path,
    /// Per-frame calibration; a KITTI-like default when absent.
    pub calib: Option<&'a Path>,
    /// `*.tbev` sidecars from [`encode_dir`], used instead of re-encoding
    /// when present and built with the same grid.
    pub bev_cache: Option<&'a Path>,
}

/// Writes `<out>/bev/<id>.txt` (post-NMS BEV detections) and
/// `<out>/data/<id>.txt` (KITTI results).
pub fn infer_dir(
    inputs: InferInputs,
    model: &Detector,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<StageSummary, PipelineError> {
    cfg.validate()?;
    let (bev_dir, data_dir) = (out_dir.join("bev"), out_dir.join("data"));
    create_dir(&bev_dir)?;
    create_dir(&data_dir)?;
    let ids = frame_ids(inputs.velodyne, "bin")?;
    let results = run_frames(&ids, cfg.workers, |id| {
        let cloud = read_velodyne(velodyne_path(inputs.velodyne, id))?;
        let calib = calibration(inputs.calib, id)?;
        let cached = match inputs.bev_cache {
            Some(dir) if !cfg.multi_offset => {
                let path = dir.join(format!("{id}.tbev"));
                if path.exists() {
                    let img = read_sidecar(&path)?;
                    if img.grid != cfg.grid {
                        return Err(PipelineError::Sidecar(format!("{} was encoded with another grid", path.display())));
                    }
                    Some(img)
                } else {
                    None
                }
            }
            _ => None,
        };
        let frame = infer_frame(model, &cloud, cached.as_ref(), &calib, cfg)?;
        let bev_path = bev_dir.join(format!("{id}.txt"));
        fs::write(&bev_path, format_bev_detections(&frame.bev, &cfg.grid)).map_err(|e| PipelineError::io(&bev_path, e))?;
        write_detections(&frame.recovered.detections, data_dir.join(format!("{id}.txt")))?;
        Ok(())
    });
    let summary = StageSummary::from_results("infer", results);
    summary.write(out_dir)?;
    Ok(summary)
}

/// BEV detection files to KITTI results via 3D recovery.
pub fn recover_dir(
    bev_dir: &Path,
    velodyne_dir: &Path,
    calib_dir: Option<&Path>,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<StageSummary, PipelineError> {
    cfg.recovery.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    create_dir(out_dir)?;
    let ids = frame_ids(bev_dir, "txt")?;
    let results = run_frames(&ids, cfg.workers, |id| {
        let path = bev_dir.join(format!("{id}.txt"));
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let dets = parse_bev_detections(&text, &cfg.grid)?;
        let cloud = read_velodyne(velodyne_path(velodyne_dir, id))?;
        let rec = recover(&dets, &cloud, &calibration(calib_dir, id)?, &cfg.grid, &cfg.recovery);
        write_detections(&rec.detections, out_dir.join(format!("{id}.txt")))?;
        Ok(())
    });
    let summary = StageSummary::from_results("recover", results);
    summary.write(out_dir)?;
    Ok(summary)
}

/// Evaluates and writes the report files into `out_dir`.
pub fn eval_dir(det_dir: &Path, gt_dir: &Path, out_dir: &Path, cfg: &EvalConfig) -> Result<EvalReport, PipelineError> {
    let report = evaluate(det_dir, gt_dir, cfg)?;
    create_dir(out_dir)?;
    report.write(out_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub mean_points: f64,
    pub stages: Vec<StageTiming>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{} frames, {:.0} points on average\n", self.frames, self.mean_points);
        let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>10}", "stage", "mean ms", "min ms", "max ms");
        for t in &self.stages {
            let _ = writeln!(s, "{:<10} {:>10.2} {:>10.2} {:>10.2}", t.stage, t.mean_ms, t.min_ms, t.max_ms);
        }
        s
    }
}

/// Wall-clock per stage on one thread, frame by frame.
pub fn bench(clouds: &[PointCloud], model: &Detector, cfg: &PipelineConfig) -> Result<BenchReport, PipelineError> {
    let names = ["encode", "forward", "decode", "nms", "recover"];
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let calib = Calibration::kitti_like();
    let ms = |t: Instant| t.elapsed().as_secs_f64() * 1e3;
    for cloud in clouds {
        let t = Instant::now();
        let img = encode(cloud, &cfg.grid);
        times[0].push(ms(t));
        let t = Instant::now();
        let outputs = model.forward(&Detector::input_tensor(&img))?;
        times[1].push(ms(t));
        let t = Instant::now();
        let mut cands = Vec::new();
        for out in &outputs {
            cands.extend(crate::net::decode_level(out, &cfg.net, img.width(), img.height())?);
        }
        times[2].push(ms(t));
        let t = Instant::now();
        let kept = suppress(&cands, &cfg.grid, cfg.nms_iou);
        times[3].push(ms(t));
        let t = Instant::now();
        let _ = recover(&kept, cloud, &calib, &cfg.grid, &cfg.recovery);
        times[4].push(ms(t));
    }
    let stages = names
        .iter()
        .zip(&times)
        .map(|(name, v)| StageTiming {
            stage: name.to_string(),
            mean_ms: v.iter().sum::<f64>() / v.len().max(1) as f64,
            min_ms: v.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: v.iter().copied().fold(0.0, f64::max),
        })
        .collect();
    let mean_points = clouds.iter().map(|c| c.len() as f64).sum::<f64>() / clouds.len().max(1) as f64;
    Ok(BenchReport { frames: clouds.len(), mean_points, stages })
}
