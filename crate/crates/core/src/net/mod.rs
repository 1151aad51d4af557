//! Forward-only detector: convolutional and attention blocks, the
//! bidirectional feature pyramid, head decoding and loss value functions.
//!
//! Tensors are single-image `C x H x W` [`FeatureMap`]s in `f32`. There is
//! no autodiff; weights come from [`init_parameters`] or a [`WeightFile`].

mod blocks;
mod conv;
mod head;
mod loss;
mod model;
mod params;
mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::GridConfig;
use crate::class::ObjectClass;
use crate::geometry::{GeometryError, OrientedBevBox};

pub use blocks::{ABlock, AttentionProbe, BA2C2f, Bottleneck, C3k2, NA2C2f};
pub use conv::{conv2d_reference, Conv};
pub use head::{decode_level, dfl_expectation, yaw_bin_centers, Head, LevelOutput};
pub use loss::{dfl_loss, loss_values, LossBreakdown, MatchedPair, LOSS_WEIGHTS};
pub use model::{Backbone, Detector, FusedLevel, Neck, Pyramid, StageBlock, INPUT_MULTIPLE};
pub use params::{init_parameters, parameter_count, zero_parameters, Module, Param, WeightFile, WEIGHT_MAGIC};
pub use tensor::{concat, sigmoid, silu, softmax, softmax_in_place, FeatureMap};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weight mismatch: {0}")]
    WeightMismatch(String),
    #[error("malformed weight container: {0}")]
    WeightFormat(String),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    /// Turns every activation off; used to check residual identities.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Silu => silu(x),
            Activation::Identity => x,
        }
    }
}

/// A fused pyramid level consumed by the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    /// Top-down output at the given stride.
    B(usize),
    /// Bottom-up output at the given stride.
    D(usize),
}

impl Level {
    pub fn stride(self) -> usize {
        match self {
            Level::B(s) | Level::D(s) => s,
        }
    }

    pub fn parse(s: &str) -> Result<Level, NetError> {
        let bad = || NetError::InvalidConfig(format!("unknown head level `{s}`"));
        let (kind, num) = s.split_at_checked(1).ok_or_else(bad)?;
        let stride: usize = num.parse().map_err(|_| bad())?;
        let level = match kind {
            "B" | "b" => Level::B(stride),
            "D" | "d" => Level::D(stride),
            _ => return Err(bad()),
        };
        match level {
            Level::B(2 | 4 | 8 | 16 | 32) | Level::D(4 | 8 | 16 | 32) => Ok(level),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::B(s) => write!(f, "B{s}"),
            Level::D(s) => write!(f, "D{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub c_base: usize,
    pub hidden_ratio: f64,
    pub ffn_ratio: usize,
    pub n_heads: usize,
    pub n_areas: usize,
    pub head_levels: Vec<String>,
    pub dfl_bins: usize,
    pub n_classes: usize,
    pub n_angle_bins: usize,
    pub activation: Activation,
    /// Minimum decoded score kept by the head.
    pub score_threshold: f64,
    /// Per-level cap on candidates, highest score first.
    pub max_candidates: usize,
    pub max_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            c_base: 32,
            hidden_ratio: 0.5,
            ffn_ratio: 2,
            n_heads: 4,
            n_areas: 4,
            head_levels: ["B2", "D4", "D8", "D16"].map(String::from).to_vec(),
            dfl_bins: 16,
            n_classes: 3,
            n_angle_bins: 16,
            activation: Activation::Silu,
            score_threshold: 0.25,
            max_candidates: 1000,
            max_width: 512,
        }
    }
}

impl NetConfig {
    /// Three-level head on `(D32, D16, B8)`.
    pub fn baseline() -> Self {
        NetConfig { head_levels: ["D32", "D16", "B8"].map(String::from).to_vec(), ..Default::default() }
    }

    pub fn levels(&self) -> Result<Vec<Level>, NetError> {
        self.head_levels.iter().map(|s| Level::parse(s)).collect()
    }

    /// Width of backbone stage `i` in `1..=5`.
    pub fn stage_width(&self, i: usize) -> usize {
        (self.c_base << (i - 1)).min(self.max_width)
    }

    /// `floor(e * c)`.
    pub fn hidden(&self, c: usize) -> usize {
        (self.hidden_ratio * c as f64).floor() as usize
    }

    /// Channels of the per-level prediction map: side bins, class logits,
    /// angle bins, objectness.
    pub fn head_outputs(&self) -> usize {
        4 * self.dfl_bins + self.n_classes + self.n_angle_bins + 1
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if ![16, 32, 64].contains(&self.c_base) {
            return bad(format!("c_base must be 16, 32 or 64, got {}", self.c_base));
        }
        if !(self.hidden_ratio > 0.0 && self.hidden_ratio <= 1.0) {
            return bad(format!("hidden_ratio must be in (0, 1], got {}", self.hidden_ratio));
        }
        if self.ffn_ratio == 0 || self.n_heads == 0 || self.n_areas == 0 {
            return bad("ffn_ratio, n_heads and n_areas must be positive".into());
        }
        if self.dfl_bins < 2 || self.n_angle_bins < 1 || self.n_classes == 0 {
            return bad("dfl_bins >= 2, n_angle_bins >= 1 and n_classes >= 1 required".into());
        }
        if self.max_width == 0 || !(0.0..=1.0).contains(&self.score_threshold) {
            return bad("max_width must be positive and score_threshold in [0, 1]".into());
        }
        let levels = self.levels()?;
        if levels.is_empty() {
            return bad("head_levels is empty".into());
        }
        let finest = levels.iter().map(|l| l.stride()).min().unwrap_or(2);
        for l in &levels {
            if let Level::D(s) = l {
                if *s <= finest {
                    return bad(format!("{l} needs a finer top-down level to start from"));
                }
            }
        }
        for s in [4, 5] {
            let ch = self.hidden(self.stage_width(s));
            if ch == 0 || ch % self.n_heads != 0 {
                return bad(format!("attention width {ch} is not divisible by {} heads", self.n_heads));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, NetError> {
        let cfg: NetConfig = toml::from_str(text).map_err(|e| NetError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Oriented box in BEV cell units: `cu` along columns (x), `cv` along rows
/// (y), extents in cells, yaw in radians in the metric frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub cu: f64,
    pub cv: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl PixelBox {
    /// Cell coordinates are continuous: the centre of cell `(u, v)` is
    /// `(u + 0.5, v + 0.5)`.
    pub fn to_meters(&self, grid: &GridConfig) -> Result<OrientedBevBox, GeometryError> {
        OrientedBevBox::new(
            grid.x_min + self.cu * grid.cell_size,
            grid.y_min + self.cv * grid.cell_size,
            self.width * grid.cell_size,
            self.length * grid.cell_size,
            self.yaw,
        )
    }

    pub fn from_meters(b: &OrientedBevBox, grid: &GridConfig) -> PixelBox {
        PixelBox {
            cu: (b.cx - grid.x_min) / grid.cell_size,
            cv: (b.cy - grid.y_min) / grid.cell_size,
            length: b.l / grid.cell_size,
            width: b.w / grid.cell_size,
            yaw: b.yaw,
        }
    }
}

/// One head candidate before NMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedDetection {
    pub bbox: PixelBox,
    pub class: ObjectClass,
    pub score: f64,
    pub stride: usize,
}
