use std::path::Path;

use image::{Rgb, RgbImage};

use super::{EvalError, PrCurve};

const SIZE: (u32, u32) = (480, 360);
const MARGIN: u32 = 40;
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);
const RAW: Rgb<u8> = Rgb([150, 150, 230]);
const INTERP: Rgb<u8> = Rgb([200, 30, 30]);

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Recall on x, precision on y, both in `[0, 1]`. The raw sweep is drawn in
/// blue, the interpolated precision at the recall grid in red.
pub fn render_pr_png(curve: &PrCurve, grid: &[f64], path: &Path) -> Result<(), EvalError> {
    let (w, h) = SIZE;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let pw = (w - 2 * MARGIN) as f64;
    let ph = (h - 2 * MARGIN) as f64;
    let to_px = |r: f64, p: f64| ((MARGIN as f64 + r * pw).round() as i64, ((h - MARGIN) as f64 - p * ph).round() as i64);

    for i in 0..=10 {
        let t = i as f64 / 10.0;
        line(&mut img, to_px(t, 0.0), to_px(t, 1.0), GRID);
        line(&mut img, to_px(0.0, t), to_px(1.0, t), GRID);
    }
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), AXIS);
    line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), AXIS);

    let raw: Vec<(i64, i64)> = curve.points.iter().map(|p| to_px(p.recall, p.precision)).collect();
    for seg in raw.windows(2) {
        line(&mut img, seg[0], seg[1], RAW);
    }
    let interp: Vec<(i64, i64)> = grid.iter().map(|&r| to_px(r, curve.interpolated_precision(r))).collect();
    for seg in interp.windows(2) {
        // step: hold precision until the next recall sample
        let corner = (seg[1].0, seg[0].1);
        line(&mut img, seg[0], corner, INTERP);
        line(&mut img, corner, seg[1], INTERP);
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| EvalError::Plot(e.to_string()))
}
