//! `triband`: command-line front end for the BEV pipeline.
//!
//! Configuration is layered: built-in defaults, then command-line flags, then
//! the TOML file given with `--config` (file values win). Relative input
//! paths are resolved against `--data-root` / `TRIBAND_DATA_ROOT` when set.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use triband_core::eval::{pr_curve, render_pr_png, load_frames, CellSpec, Difficulty, RecallMode, Space};
use triband_core::net::{parameter_count, FeatureMap, WeightFile};
use triband_core::pipeline::{self, InferInputs, StageSummary};
use triband_core::{GridConfig, ObjectClass, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "triband", version, about = "Three-band BEV LiDAR detection pipeline")]
struct Cli {
    /// TOML pipeline config; its values override flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base directory for relative input paths.
    #[arg(long, global = true, env = "TRIBAND_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring `PipelineConfig` fields.
#[derive(Debug, Default, Args)]
struct ConfigFlags {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// BEV cell size in meters; the region of interest is kept.
    #[arg(long, global = true)]
    cell_size: Option<f64>,
    /// Rotated NMS IoU threshold.
    #[arg(long, global = true)]
    nms_iou: Option<f64>,
    /// Decode the three vertically shifted encodings and merge them.
    #[arg(long, global = true)]
    multi_offset: bool,
    #[arg(long, global = true, allow_hyphen_values = true)]
    dz_min: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    dz_max: Option<f64>,
    /// Jitter standard deviation in 8-bit intensity units.
    #[arg(long, global = true)]
    sigma: Option<f64>,
    /// Global augmentation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base channel width of the detector (16, 32 or 64).
    #[arg(long, global = true)]
    c_base: Option<usize>,
    #[arg(long, global = true)]
    score_threshold: Option<f64>,
    /// Seed of the random weights used without `--weights`.
    #[arg(long, global = true)]
    init_seed: Option<u64>,
    #[arg(long, global = true)]
    init_gain: Option<f32>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterize velodyne scans to PNG images and raw tensor sidecars.
    Encode {
        #[arg(long)]
        velodyne: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write augmented encodings and the per-frame random draws.
    Augment {
        #[arg(long)]
        velodyne: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write original/augmented side-by-side images.
        #[arg(long)]
        pairs: bool,
    },
    /// Detect in BEV and lift detections to KITTI 3D results.
    Infer {
        #[arg(long)]
        velodyne: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-frame KITTI calibration files; a KITTI-like default otherwise.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Directory of `.tbev` sidecars written by `encode`.
        #[arg(long)]
        bev_cache: Option<PathBuf>,
        /// Weight container; seeded random weights otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Lift BEV detection files to KITTI 3D results.
    Recover {
        #[arg(long)]
        bev: PathBuf,
        #[arg(long)]
        velodyne: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// KITTI-style AP evaluation with report tables and PR plots.
    Eval {
        #[arg(long)]
        det: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Recall sampling; `both` writes one labeled report per mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Build the detector, run one forward pass and check output shapes.
    ForwardCheck {
        /// Use the three-level baseline head layout.
        #[arg(long)]
        baseline: bool,
        /// Input height and width in cells.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Save the weights that were checked.
        #[arg(long)]
        save_weights: Option<PathBuf>,
    },
    /// Per-stage wall-clock on the scans of a directory.
    Bench {
        #[arg(long)]
        velodyne: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Use at most this many scans.
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// Plot one precision/recall curve.
    PlotPr {
        #[arg(long)]
        det: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "Car")]
        class: ObjectClass,
        #[arg(long, value_enum, default_value_t = DifficultyArg::Moderate)]
        difficulty: DifficultyArg,
        #[arg(long, value_enum, default_value_t = SpaceArg::Bev)]
        space: SpaceArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "inclusive-40")]
    Inclusive,
    #[value(name = "devkit-40")]
    Devkit,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DifficultyArg {
    Easy,
    Moderate,
    Hard,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SpaceArg {
    Bev,
    #[value(name = "3d")]
    ThreeD,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn build_config(flags: &ConfigFlags, file: Option<&Path>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(w) = flags.workers {
        cfg.workers = w;
    }
    if let Some(c) = flags.cell_size {
        let g = &cfg.grid;
        cfg.grid = GridConfig::with_roi((g.x_min, g.x_max), (g.y_min, g.y_max), c)?;
    }
    if let Some(v) = flags.nms_iou {
        cfg.nms_iou = v;
    }
    cfg.multi_offset |= flags.multi_offset;
    if let Some(v) = flags.dz_min {
        cfg.augment.dz_min = v;
    }
    if let Some(v) = flags.dz_max {
        cfg.augment.dz_max = v;
    }
    if let Some(v) = flags.sigma {
        cfg.augment.sigma = v;
    }
    if let Some(v) = flags.seed {
        cfg.augment.seed = v;
    }
    if let Some(v) = flags.c_base {
        cfg.net.c_base = v;
    }
    if let Some(v) = flags.score_threshold {
        cfg.net.score_threshold = v;
    }
    if let Some(v) = flags.init_seed {
        cfg.init_seed = v;
    }
    if let Some(v) = flags.init_gain {
        cfg.init_gain = v;
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let over: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut base: toml::Table = toml::from_str(&cfg.to_toml())?;
        merge(&mut base, over);
        cfg = PipelineConfig::from_toml(&toml::to_string(&base)?).with_context(|| format!("config {}", path.display()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn report(summary: &StageSummary) -> ExitCode {
    println!("{}: {} frames, {} ok, {} failed", summary.stage, summary.frames, summary.succeeded.len(), summary.failed.len());
    for f in &summary.failed {
        eprintln!("  {}: {}", f.id, f.error);
    }
    if summary.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn forward_check(cfg: &PipelineConfig, size: usize, save: Option<&Path>) -> Result<ExitCode> {
    let mut det = pipeline::load_model(None, cfg)?;
    let n_params = parameter_count(&mut det);
    println!("c_base {}: {} parameters ({:.2}M)", cfg.net.c_base, n_params, n_params as f64 / 1e6);
    let data = (0..3 * size * size).map(|i| ((i as f32) * 0.37).sin() * 0.5 + 0.5).collect();
    let x = FeatureMap::from_vec(3, size, size, 1, data)?.pad_to_multiple(triband_core::net::INPUT_MULTIPLE);
    let outputs = det.forward(&x)?;
    let expected = cfg.net.levels()?;
    let mut ok = outputs.len() == expected.len();
    for (out, level) in outputs.iter().zip(&expected) {
        let s = level.stride();
        let want = (cfg.net.head_outputs(), x.h / s, x.w / s);
        let good = out.level == *level && out.map.shape() == want && out.map.data.iter().all(|v| v.is_finite());
        ok &= good;
        println!("{:>4} stride {:>2} shape {:?} {}", out.level, s, out.map.shape(), if good { "ok" } else { "MISMATCH" });
    }
    if let Some(path) = save {
        WeightFile::from_module(&mut det).save(path)?;
        info!("weights written to {}", path.display());
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = build_config(&cli.flags, cli.config.as_deref())?;
    let root = cli.data_root.as_deref();
    let input = |p: &Path| resolve(root, p);
    match cli.command {
        Command::Encode { velodyne, out } => Ok(report(&pipeline::encode_dir(&input(&velodyne), &out, &cfg)?)),
        Command::Augment { velodyne, out, pairs } => {
            Ok(report(&pipeline::augment_dir(&input(&velodyne), &out, &cfg, pairs)?))
        }
        Command::Infer { velodyne, out, calib, bev_cache, weights } => {
            let model = pipeline::load_model(weights.map(|w| input(&w)).as_deref(), &cfg)?;
            let (velodyne, calib, bev_cache) = (input(&velodyne), calib.map(|c| input(&c)), bev_cache.map(|c| input(&c)));
            let inputs = InferInputs { velodyne: &velodyne, calib: calib.as_deref(), bev_cache: bev_cache.as_deref() };
            Ok(report(&pipeline::infer_dir(inputs, &model, &out, &cfg)?))
        }
        Command::Recover { bev, velodyne, out, calib } => {
            let calib = calib.map(|c| input(&c));
            Ok(report(&pipeline::recover_dir(&input(&bev), &input(&velodyne), calib.as_deref(), &out, &cfg)?))
        }
        Command::Eval { det, gt, out, mode } => {
            let (det, gt) = (input(&det), input(&gt));
            let runs: Vec<(RecallMode, PathBuf)> = match mode {
                None => vec![(cfg.eval.recall_mode, out)],
                Some(ModeArg::Inclusive) => vec![(RecallMode::Inclusive, out)],
                Some(ModeArg::Devkit) => vec![(RecallMode::Devkit, out)],
                Some(ModeArg::Both) => [RecallMode::Inclusive, RecallMode::Devkit]
                    .map(|m| (m, out.join(m.name())))
                    .to_vec(),
            };
            for (m, dir) in runs {
                cfg.eval.recall_mode = m;
                let r = pipeline::eval_dir(&det, &gt, &dir, &cfg.eval)?;
                println!("{}", r.to_table());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ForwardCheck { baseline, size, save_weights } => {
            if baseline {
                cfg.net.head_levels = triband_core::NetConfig::baseline().head_levels;
            }
            if size == 0 {
                bail!("--size must be positive");
            }
            forward_check(&cfg, size, save_weights.as_deref())
        }
        Command::Bench { velodyne, weights, limit } => {
            let dir = input(&velodyne);
            let ids = pipeline::frame_ids(&dir, "bin")?;
            let clouds = ids
                .iter()
                .take(limit)
                .map(|id| triband_core::kitti_io::read_velodyne(dir.join(format!("{id}.bin"))))
                .collect::<Result<Vec<_>, _>>()?;
            if clouds.is_empty() {
                bail!("no scans in {}", dir.display());
            }
            let model = pipeline::load_model(weights.map(|w| input(&w)).as_deref(), &cfg)?;
            print!("{}", pipeline::bench(&clouds, &model, &cfg)?.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::PlotPr { det, gt, out, class, difficulty, space } => {
            let frames = load_frames(&input(&det), &input(&gt))?;
            let difficulty = match difficulty {
                DifficultyArg::Easy => Difficulty::Easy,
                DifficultyArg::Moderate => Difficulty::Moderate,
                DifficultyArg::Hard => Difficulty::Hard,
            };
            let space = match space {
                SpaceArg::Bev => Space::Bev,
                SpaceArg::ThreeD => Space::ThreeD,
            };
            let cell = CellSpec { class, difficulty, space, band: None };
            let curve = pr_curve(&frames, &cell, &cfg.eval);
            render_pr_png(&curve, &cfg.eval.recall_grid(), &out)?;
            match curve.average_precision(&cfg.eval.recall_grid()) {
                Some(ap) => println!("{class} {} {}: AP {:.4} over {} ground truth", difficulty.name(), space.name(), ap, curve.n_gt),
                None => println!("{class} {} {}: no ground truth", difficulty.name(), space.name()),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "nms_iou = 0.3\n[augment]\nsigma = 5.0\n").unwrap();
        let flags = ConfigFlags { nms_iou: Some(0.6), seed: Some(9), sigma: Some(1.0), ..Default::default() };
        let cfg = build_config(&flags, Some(&path)).unwrap();
        assert_eq!((cfg.nms_iou, cfg.augment.sigma, cfg.augment.seed), (0.3, 5.0, 9));
        assert_eq!(cfg.augment.dz_min, -0.3);
        let cfg = build_config(&flags, None).unwrap();
        assert_eq!((cfg.nms_iou, cfg.augment.sigma), (0.6, 1.0));
    }

    #[test]
    fn cell_size_flag_keeps_the_region() {
        let cfg = build_config(&ConfigFlags { cell_size: Some(0.2), ..Default::default() }, None).unwrap();
        assert_eq!((cfg.grid.width, cfg.grid.height), (350, 400));
        assert!(build_config(&ConfigFlags { nms_iou: Some(2.0), ..Default::default() }, None).is_err());
    }

    #[test]
    fn data_root_applies_to_relative_paths_only() {
        let root = Path::new("/data");
        assert_eq!(resolve(Some(root), Path::new("velodyne")), PathBuf::from("/data/velodyne"));
        assert_eq!(resolve(Some(root), Path::new("/abs")), PathBuf::from("/abs"));
        assert_eq!(resolve(None, Path::new("rel")), PathBuf::from("rel"));
    }
}
