//! KITTI file formats: velodyne scans, `label_2` object labels, calibration
//! files and the result format used for detections.
//!
//! Frame conventions: the LiDAR frame is x forward, y left, z up. The
//! rectified camera frame is x right, y down, z forward. Camera-frame box
//! locations are the center of the bottom face.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use thiserror::Error;

use crate::class::{LabelClass, ObjectClass};
use crate::geometry::{wrap_angle, Box3D, OrientedBevBox};

const POINT_RECORD_BYTES: usize = 16;
const ORTHONORMAL_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed velodyne file: {len} bytes is not a multiple of {POINT_RECORD_BYTES}")]
    MalformedFile { len: usize },
    #[error("point {index} has reflectance {value} outside [0, 1]")]
    ReflectanceOutOfRange { index: usize, value: f32 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("calibration key `{0}` is missing")]
    MissingKey(&'static str),
    #[error("calibration matrix `{0}` is not orthonormal")]
    NotOrthonormal(&'static str),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
}

impl KittiError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        KittiError::Io { path: path.to_path_buf(), source }
    }
}

/// One LiDAR return in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub reflectance: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, reflectance: f64) -> Self {
        Point { x, y, z, reflectance }
    }
}

/// Ordered set of LiDAR returns. Every reflectance lies in `[0, 1]` when the
/// cloud comes from [`read_velodyne`] or [`PointCloud::new`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    /// Builds a cloud, rejecting any reflectance outside `[0, 1]`.
    pub fn new(points: Vec<Point>) -> Result<Self, KittiError> {
        for (index, p) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.reflectance) {
                return Err(KittiError::ReflectanceOutOfRange { index, value: p.reflectance as f32 });
            }
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Encodes the cloud as a velodyne binary (little-endian f32 quadruples).
    pub fn to_velodyne_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * POINT_RECORD_BYTES);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.reflectance] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }
}

/// Decodes a velodyne scan held in memory.
pub fn parse_velodyne(bytes: &[u8]) -> Result<PointCloud, KittiError> {
    if bytes.len() % POINT_RECORD_BYTES != 0 {
        return Err(KittiError::MalformedFile { len: bytes.len() });
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_RECORD_BYTES);
    for (index, record) in bytes.chunks_exact(POINT_RECORD_BYTES).enumerate() {
        let f = |i: usize| f32::from_le_bytes([record[i], record[i + 1], record[i + 2], record[i + 3]]);
        let (x, y, z, r) = (f(0), f(4), f(8), f(12));
        if !(0.0..=1.0).contains(&r) {
            return Err(KittiError::ReflectanceOutOfRange { index, value: r });
        }
        points.push(Point::new(x as f64, y as f64, z as f64, r as f64));
    }
    Ok(PointCloud { points })
}

pub fn read_velodyne(path: impl AsRef<Path>) -> Result<PointCloud, KittiError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| KittiError::io(path, e))?;
    parse_velodyne(&bytes)
}

pub fn write_velodyne(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), KittiError> {
    let path = path.as_ref();
    fs::write(path, cloud.to_velodyne_bytes()).map_err(|e| KittiError::io(path, e))
}

/// One object line of a KITTI label file.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub class: LabelClass,
    /// Fraction in `[0, 1]`; `-1` marks "not available" (DontCare, results).
    pub truncation: f64,
    /// 0 fully visible, 1 partly occluded, 2 largely occluded, 3 unknown.
    /// `-1` marks "not available".
    pub occlusion: i32,
    pub alpha: f64,
    /// `(left, top, right, bottom)` in pixels.
    pub bbox2d: [f64; 4],
    /// `(h, w, l)` in meters.
    pub dimensions: [f64; 3],
    /// Bottom-face center in the rectified camera frame.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl KittiLabel {
    pub fn bbox_height(&self) -> f64 {
        self.bbox2d[3] - self.bbox2d[1]
    }

    pub fn is_dont_care(&self) -> bool {
        self.class == LabelClass::DontCare
    }

    /// Ground-plane distance of the box center from the camera origin.
    pub fn ground_range(&self) -> f64 {
        self.location[0].hypot(self.location[2])
    }

    pub fn camera_box(&self) -> CameraBox {
        CameraBox { dimensions: self.dimensions, location: self.location, rotation_y: self.rotation_y }
    }
}

fn parse_label_line(line: &str, line_no: usize) -> Result<KittiLabel, KittiError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 15 && fields.len() != 16 {
        return Err(KittiError::Parse {
            line: line_no,
            message: format!("expected 15 or 16 fields, found {}", fields.len()),
        });
    }
    let num = |i: usize| -> Result<f64, KittiError> {
        fields[i].parse::<f64>().map_err(|_| KittiError::Parse {
            line: line_no,
            message: format!("field {} (`{}`) is not a number", i + 1, fields[i]),
        })
    };
    let occlusion = fields[2].parse::<f64>().ok().filter(|v| v.fract() == 0.0).ok_or_else(|| {
        KittiError::Parse { line: line_no, message: format!("occlusion `{}` is not an integer", fields[2]) }
    })? as i32;
    let label = KittiLabel {
        class: LabelClass::parse(fields[0]),
        truncation: num(1)?,
        occlusion,
        alpha: num(3)?,
        bbox2d: [num(4)?, num(5)?, num(6)?, num(7)?],
        dimensions: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
        score: if fields.len() == 16 { Some(num(15)?) } else { None },
    };
    let [left, top, right, bottom] = label.bbox2d;
    if right < left || bottom < top {
        return Err(KittiError::Parse { line: line_no, message: "2D box has negative extent".into() });
    }
    if !label.is_dont_care() && label.dimensions.iter().any(|&d| d < 0.0) {
        return Err(KittiError::Parse { line: line_no, message: "negative 3D dimension".into() });
    }
    Ok(label)
}

/// Parses the contents of a label file. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse_labels(text: &str) -> Result<Vec<KittiLabel>, KittiError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line(l, i + 1))
        .collect()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<KittiLabel>, KittiError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| KittiError::io(path, e))?;
    parse_labels(&text)
}

/// Sensor calibration of one KITTI frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub p2: Matrix3x4<f64>,
    pub r0_rect: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
}

fn check_orthonormal(m: &Matrix3<f64>, name: &'static str) -> Result<(), KittiError> {
    let err = (m * m.transpose() - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOL {
        return Err(KittiError::NotOrthonormal(name));
    }
    Ok(())
}

impl Calibration {
    pub fn new(p2: Matrix3x4<f64>, r0_rect: Matrix3<f64>, tr_velo_to_cam: Matrix3x4<f64>) -> Result<Self, KittiError> {
        check_orthonormal(&r0_rect, "R0_rect")?;
        check_orthonormal(&tr_velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned(), "Tr_velo_to_cam")?;
        Ok(Calibration { p2, r0_rect, tr_velo_to_cam })
    }

    /// `R0 = I`, `Tr = [I | 0]` and a unit-focal `P2`.
    pub fn identity() -> Self {
        Calibration { p2: Matrix3x4::identity(), r0_rect: Matrix3::identity(), tr_velo_to_cam: Matrix3x4::identity() }
    }

    /// Typical KITTI sensor geometry: velodyne x/y/z mapped onto camera
    /// z/-x/-y with a small lever arm.
    pub fn kitti_like() -> Self {
        #[rustfmt::skip]
        let tr = Matrix3x4::new(
            0.0, -1.0, 0.0, 0.0,
            0.0, 0.0, -1.0, -0.08,
            1.0, 0.0, 0.0, -0.27,
        );
        #[rustfmt::skip]
        let p2 = Matrix3x4::new(
            721.5377, 0.0, 609.5593, 44.85728,
            0.0, 721.5377, 172.854, 0.2163791,
            0.0, 0.0, 1.0, 0.002745884,
        );
        Calibration { p2, r0_rect: Matrix3::identity(), tr_velo_to_cam: tr }
    }

    pub fn lidar_to_camera(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.r0_rect * (self.tr_velo_to_cam * Vector4::new(p.x, p.y, p.z, 1.0))
    }

    pub fn camera_to_lidar(&self, p: Vector3<f64>) -> Vector3<f64> {
        let unrect = self.r0_rect.try_inverse().unwrap_or_else(|| self.r0_rect.transpose()) * p;
        let rot = self.tr_velo_to_cam.fixed_view::<3, 3>(0, 0);
        let t = self.tr_velo_to_cam.column(3);
        rot.transpose() * (unrect - t)
    }

    /// Projects camera-frame points through `P2`; `None` if any lies behind
    /// the image plane.
    pub fn project_to_image(&self, points: &[Vector3<f64>]) -> Option<[f64; 4]> {
        let mut bounds = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in points {
            let q = self.p2 * Vector4::new(p.x, p.y, p.z, 1.0);
            if q.z <= 1e-6 {
                return None;
            }
            let (u, v) = (q.x / q.z, q.y / q.z);
            bounds[0] = bounds[0].min(u);
            bounds[1] = bounds[1].min(v);
            bounds[2] = bounds[2].max(u);
            bounds[3] = bounds[3].max(v);
        }
        Some(bounds)
    }

    pub fn to_kitti_string(&self) -> String {
        let mut s = String::new();
        let row = |vals: &mut dyn Iterator<Item = f64>| vals.map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "P2: {}", row(&mut self.p2.transpose().iter().copied()));
        let _ = writeln!(s, "R0_rect: {}", row(&mut self.r0_rect.transpose().iter().copied()));
        let _ = writeln!(s, "Tr_velo_to_cam: {}", row(&mut self.tr_velo_to_cam.transpose().iter().copied()));
        s
    }
}

/// Parses a KITTI calibration file (`KEY: v1 v2 ...` lines). Unknown keys are
/// ignored.
pub fn parse_calib(text: &str) -> Result<Calibration, KittiError> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    for (i, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        if !matches!(key, "P2" | "R0_rect" | "Tr_velo_to_cam") {
            continue;
        }
        let values = rest
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| KittiError::Parse { line: i + 1, message: format!("{key}: {e}") })?;
        let expect = if key == "R0_rect" { 9 } else { 12 };
        if values.len() != expect {
            return Err(KittiError::Parse {
                line: i + 1,
                message: format!("{key}: expected {expect} values, found {}", values.len()),
            });
        }
        match key {
            "P2" => p2 = Some(Matrix3x4::from_row_slice(&values)),
            "R0_rect" => r0 = Some(Matrix3::from_row_slice(&values)),
            _ => tr = Some(Matrix3x4::from_row_slice(&values)),
        }
    }
    Calibration::new(
        p2.ok_or(KittiError::MissingKey("P2"))?,
        r0.ok_or(KittiError::MissingKey("R0_rect"))?,
        tr.ok_or(KittiError::MissingKey("Tr_velo_to_cam"))?,
    )
}

pub fn read_calib(path: impl AsRef<Path>) -> Result<Calibration, KittiError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| KittiError::io(path, e))?;
    parse_calib(&text)
}

/// Box geometry in KITTI camera convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraBox {
    /// `(h, w, l)`
    pub dimensions: [f64; 3],
    /// Bottom-face center.
    pub location: [f64; 3],
    pub rotation_y: f64,
}

impl CameraBox {
    /// The eight corners in the camera frame, bottom face first.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let [h, w, l] = self.dimensions;
        let (s, c) = self.rotation_y.sin_cos();
        let xs = [l, l, -l, -l, l, l, -l, -l].map(|v| v / 2.0);
        let ys = [0.0, 0.0, 0.0, 0.0, -h, -h, -h, -h];
        let zs = [w, -w, -w, w, w, -w, -w, w].map(|v| v / 2.0);
        std::array::from_fn(|i| {
            Vector3::new(
                c * xs[i] + s * zs[i] + self.location[0],
                ys[i] + self.location[1],
                -s * xs[i] + c * zs[i] + self.location[2],
            )
        })
    }
}

/// Converts a LiDAR-yaw to KITTI `rotation_y`: `ry = -yaw - pi/2`, wrapped.
pub fn yaw_to_rotation_y(yaw: f64) -> f64 {
    wrap_angle(-yaw - PI / 2.0)
}

pub fn rotation_y_to_yaw(rotation_y: f64) -> f64 {
    wrap_angle(-rotation_y - PI / 2.0)
}

/// Maps a LiDAR-frame box into the rectified camera frame.
pub fn lidar_box_to_camera(b: &Box3D, calib: &Calibration) -> Result<CameraBox, KittiError> {
    let fp = &b.footprint;
    if !(fp.w > 0.0 && fp.l > 0.0 && b.z_top > b.z_bottom) {
        return Err(KittiError::DegenerateBox(format!(
            "w={} l={} z=[{}, {}]",
            fp.w, fp.l, b.z_bottom, b.z_top
        )));
    }
    let loc = calib.lidar_to_camera(Vector3::new(fp.cx, fp.cy, b.z_bottom));
    Ok(CameraBox {
        dimensions: [b.z_top - b.z_bottom, fp.w, fp.l],
        location: [loc.x, loc.y, loc.z],
        rotation_y: yaw_to_rotation_y(fp.yaw),
    })
}

/// Inverse of [`lidar_box_to_camera`].
pub fn camera_box_to_lidar(b: &CameraBox, calib: &Calibration) -> Result<Box3D, KittiError> {
    let [h, w, l] = b.dimensions;
    if !(h > 0.0 && w > 0.0 && l > 0.0) {
        return Err(KittiError::DegenerateBox(format!("dimensions {:?}", b.dimensions)));
    }
    let p = calib.camera_to_lidar(Vector3::from(b.location));
    let footprint = OrientedBevBox::new(p.x, p.y, w, l, rotation_y_to_yaw(b.rotation_y))
        .map_err(|e| KittiError::DegenerateBox(e.to_string()))?;
    Ok(Box3D { footprint, z_bottom: p.z, z_top: p.z + h })
}

/// A scored 3D detection in KITTI camera convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection3D {
    pub class: ObjectClass,
    pub alpha: f64,
    pub bbox2d: [f64; 4],
    pub dimensions: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: f64,
}

impl Detection3D {
    /// Builds a detection from camera geometry, deriving the observation
    /// angle and the image-plane box from the calibration.
    pub fn from_camera_box(class: ObjectClass, cam: &CameraBox, calib: &Calibration, score: f64) -> Self {
        let [x, _, z] = cam.location;
        let alpha = wrap_angle(cam.rotation_y - x.atan2(z));
        let bbox2d = calib.project_to_image(&cam.corners()).unwrap_or([0.0; 4]);
        Detection3D {
            class,
            alpha,
            bbox2d,
            dimensions: cam.dimensions,
            location: cam.location,
            rotation_y: cam.rotation_y,
            score,
        }
    }

    pub fn camera_box(&self) -> CameraBox {
        CameraBox { dimensions: self.dimensions, location: self.location, rotation_y: self.rotation_y }
    }

    pub fn to_label(&self) -> KittiLabel {
        KittiLabel {
            class: LabelClass::Known(self.class),
            truncation: -1.0,
            occlusion: -1,
            alpha: self.alpha,
            bbox2d: self.bbox2d,
            dimensions: self.dimensions,
            location: self.location,
            rotation_y: self.rotation_y,
            score: Some(self.score),
        }
    }
}

/// Renders detections in the KITTI result format, highest score first
/// (stable for equal scores).
pub fn format_detections(dets: &[Detection3D]) -> String {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut out = String::new();
    for d in order.into_iter().map(|i| &dets[i]) {
        let [l, t, r, b] = d.bbox2d;
        let [h, w, len] = d.dimensions;
        let [x, y, z] = d.location;
        let _ = writeln!(
            out,
            "{} -1 -1 {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            d.class, d.alpha, l, t, r, b, h, w, len, x, y, z, d.rotation_y, d.score
        );
    }
    out
}

pub fn write_detections(dets: &[Detection3D], path: impl AsRef<Path>) -> Result<(), KittiError> {
    let path = path.as_ref();
    fs::write(path, format_detections(dets)).map_err(|e| KittiError::io(path, e))
}
