//! Three-band maximum-reflectance BEV rasterization.
//!
//! Each cell of the ground-plane grid stores, per height band, the maximum
//! corrected reflectance `gain * (rho + bias)` of the returns that fall into
//! it, quantized to 8 bits. Bands are measured from a reference plane
//! `sensor_height` below the sensor: low `< band_low`, mid
//! `[band_low, band_high)`, high `>= band_high`. Column `u` follows x, row `v`
//! follows y with `v = 0` at `y_min`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kitti_io::PointCloud;

#[derive(Debug, Error)]
pub enum BevError {
    #[error("invalid grid configuration: {0}")]
    InvalidGrid(String),
    #[error("reflectance {0} outside [0, 1]")]
    Domain(f64),
    #[error("image buffer has {got} bytes, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("png error: {0}")]
    Png(#[from] image::ImageError),
    #[error("config parse error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    pub sensor_height: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub reflectance_bias: f64,
    pub reflectance_gain: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            x_min: 0.0,
            x_max: 70.0,
            y_min: -40.0,
            y_max: 40.0,
            cell_size: 0.1,
            width: 700,
            height: 800,
            sensor_height: 1.73,
            band_low: 0.65,
            band_high: 1.30,
            reflectance_bias: 0.1,
            reflectance_gain: 1.3,
        }
    }
}

impl GridConfig {
    /// Same bands and reflectance correction over a different ROI; the cell
    /// counts are derived from the extents.
    pub fn with_roi(x_range: (f64, f64), y_range: (f64, f64), cell_size: f64) -> Result<Self, BevError> {
        let cfg = GridConfig {
            x_min: x_range.0,
            x_max: x_range.1,
            y_min: y_range.0,
            y_max: y_range.1,
            cell_size,
            width: ((x_range.1 - x_range.0) / cell_size).round() as usize,
            height: ((y_range.1 - y_range.0) / cell_size).round() as usize,
            ..GridConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BevError> {
        let bad = |m: String| Err(BevError::InvalidGrid(m));
        if !(self.cell_size > 0.0) || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return bad("empty ROI or non-positive cell size".into());
        }
        let w = (self.x_max - self.x_min) / self.cell_size;
        let h = (self.y_max - self.y_min) / self.cell_size;
        if (w - self.width as f64).abs() > 1e-6 || (h - self.height as f64).abs() > 1e-6 {
            return bad(format!("ROI spans {w}x{h} cells but grid declares {}x{}", self.width, self.height));
        }
        if self.width == 0 || self.height == 0 {
            return bad("grid has no cells".into());
        }
        if !(self.band_low < self.band_high) {
            return bad("band edges must be strictly increasing".into());
        }
        if !(self.reflectance_gain > 0.0) {
            return bad("reflectance gain must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, BevError> {
        let cfg: GridConfig = toml::from_str(text).map_err(|e| BevError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grid config serializes")
    }

    /// Sensor-frame z of the low/mid and mid/high band edges.
    fn band_edges_z(&self) -> (f64, f64) {
        (self.band_low - self.sensor_height, self.band_high - self.sensor_height)
    }
}

/// Cell `(u, v)` containing `(x, y)`; `None` outside the half-open ROI.
pub fn cell_of(x: f64, y: f64, grid: &GridConfig) -> Option<(usize, usize)> {
    if !(x >= grid.x_min && x < grid.x_max && y >= grid.y_min && y < grid.y_max) {
        return None;
    }
    let u = ((x - grid.x_min) / grid.cell_size).floor() as usize;
    let v = ((y - grid.y_min) / grid.cell_size).floor() as usize;
    Some((u.min(grid.width - 1), v.min(grid.height - 1)))
}

/// Height band of a return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Band {
    Low,
    Mid,
    High,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Low, Band::Mid, Band::High];

    /// Image channel (R, G, B).
    pub fn channel(self) -> usize {
        self as usize
    }

    /// 1-based band number.
    pub fn number(self) -> u8 {
        self as u8 + 1
    }
}

/// Heights within this distance below a band edge count as on the edge, so
/// decimal edge values survive the sensor-height subtraction.
pub const BAND_EDGE_TOLERANCE: f64 = 1e-9;

/// Band of a sensor-frame height. Total: the low and high bands are open
/// ended.
pub fn band_of(z: f64, grid: &GridConfig) -> Band {
    let (low, high) = grid.band_edges_z();
    if z < low - BAND_EDGE_TOLERANCE {
        Band::Low
    } else if z < high - BAND_EDGE_TOLERANCE {
        Band::Mid
    } else {
        Band::High
    }
}

/// `gain * (rho + bias)` for `rho` in `[0, 1]`.
pub fn corrected_reflectance(rho: f64, grid: &GridConfig) -> Result<f64, BevError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(BevError::Domain(rho));
    }
    Ok(grid.reflectance_gain * (rho + grid.reflectance_bias))
}

/// 8-bit intensity of a corrected reflectance: clamp `255 * r` at 255, round
/// to nearest.
pub fn quantize(corrected: f64) -> u8 {
    (255.0 * corrected).min(255.0).max(0.0).round() as u8
}

/// `height x width x 3` raster, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BevImage {
    pub grid: GridConfig,
    pixels: Vec<u8>,
}

impl BevImage {
    pub fn zeros(grid: GridConfig) -> Self {
        BevImage { pixels: vec![0; grid.width * grid.height * 3], grid }
    }

    pub fn from_pixels(grid: GridConfig, pixels: Vec<u8>) -> Result<Self, BevError> {
        let expected = grid.width * grid.height * 3;
        if pixels.len() != expected {
            return Err(BevError::BufferSize { got: pixels.len(), expected });
        }
        Ok(BevImage { grid, pixels })
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    #[inline]
    fn offset(&self, u: usize, v: usize, channel: usize) -> usize {
        (v * self.grid.width + u) * 3 + channel
    }

    pub fn get(&self, u: usize, v: usize, channel: usize) -> u8 {
        self.pixels[self.offset(u, v, channel)]
    }

    pub fn set(&mut self, u: usize, v: usize, channel: usize, value: u8) {
        let o = self.offset(u, v, channel);
        self.pixels[o] = value;
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn nonzero_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    /// Channel-first `[3, height, width]` float tensor scaled to `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let (w, h) = (self.grid.width, self.grid.height);
        let mut out = vec![0.0f32; 3 * w * h];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * w * h + i] = px[c] as f32 / 255.0;
            }
        }
        out
    }
}

/// Rasterizes a cloud into the three-band image. Points outside the ROI are
/// ignored; the result does not depend on point order.
pub fn encode(cloud: &PointCloud, grid: &GridConfig) -> BevImage {
    let mut img = BevImage::zeros(*grid);
    for p in &cloud.points {
        let Some((u, v)) = cell_of(p.x, p.y, grid) else {
            continue;
        };
        let Ok(rho) = corrected_reflectance(p.reflectance, grid) else {
            continue;
        };
        let value = quantize(rho);
        let o = img.offset(u, v, band_of(p.z, grid).channel());
        if value > img.pixels[o] {
            img.pixels[o] = value;
        }
    }
    img
}

/// Writes the image as an 8-bit RGB PNG; row 0 is the `y_min` edge.
pub fn render_png(img: &BevImage, path: impl AsRef<Path>) -> Result<(), BevError> {
    image::save_buffer(path, &img.pixels, img.width() as u32, img.height() as u32, image::ColorType::Rgb8)?;
    Ok(())
}

pub fn read_png(path: impl AsRef<Path>, grid: GridConfig) -> Result<BevImage, BevError> {
    let decoded = image::open(path)?.to_rgb8();
    if decoded.width() as usize != grid.width || decoded.height() as usize != grid.height {
        return Err(BevError::InvalidGrid(format!(
            "png is {}x{}, grid is {}x{}",
            decoded.width(),
            decoded.height(),
            grid.width,
            grid.height
        )));
    }
    BevImage::from_pixels(grid, decoded.into_raw())
}
