//! Oriented boxes on the ground plane.
//!
//! Polygons are convex and counter-clockwise. Intersection areas come from
//! Sutherland-Hodgman clipping of one box polygon against the other.

use std::f64::consts::PI;

use thiserror::Error;

use crate::class::ObjectClass;

/// Tolerance of the half-plane test used while clipping, in meters.
pub const CLIP_EPS: f64 = 1e-9;
/// Intersection areas below this (m^2) count as zero.
pub const AREA_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box extents must be positive and finite (w={w}, l={l})")]
    InvalidExtent { w: f64, l: f64 },
    #[error("box center and yaw must be finite")]
    NonFinite,
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polygon {
    pub vertices: Vec<Point2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point2>) -> Self {
        Polygon { vertices }
    }

    /// Shoelace area; positive for counter-clockwise order.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            acc += a.x * b.y - b.x * a.y;
        }
        acc / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Area centroid; falls back to the vertex mean for degenerate polygons.
    pub fn centroid(&self) -> Point2 {
        let n = self.vertices.len();
        if n == 0 {
            return Point2::default();
        }
        let a = self.signed_area();
        if a.abs() < AREA_EPS {
            let (sx, sy) = self.vertices.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
            return Point2::new(sx / n as f64, sy / n as f64);
        }
        let (mut cx, mut cy) = (0.0, 0.0);
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let c = p.x * q.y - q.x * p.y;
            cx += (p.x + q.x) * c;
            cy += (p.y + q.y) * c;
        }
        Point2::new(cx / (6.0 * a), cy / (6.0 * a))
    }

    /// Closed containment test for a convex counter-clockwise polygon.
    pub fn contains(&self, p: Point2) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        (0..n).all(|i| cross(self.vertices[i], self.vertices[(i + 1) % n], p) >= -CLIP_EPS)
    }

    /// `(min_x, min_y, max_x, max_y)`
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        )
    }

    /// Scales every vertex about the centroid.
    pub fn scaled(&self, factor: f64) -> Polygon {
        let c = self.centroid();
        Polygon::new(
            self.vertices
                .iter()
                .map(|p| Point2::new(c.x + factor * (p.x - c.x), c.y + factor * (p.y - c.y)))
                .collect(),
        )
    }
}

fn segment_line_intersection(s: Point2, e: Point2, a: Point2, b: Point2) -> Point2 {
    let ds = cross(a, b, s);
    let de = cross(a, b, e);
    let denom = ds - de;
    if denom.abs() < f64::EPSILON {
        return e;
    }
    let t = ds / denom;
    Point2::new(s.x + t * (e.x - s.x), s.y + t * (e.y - s.y))
}

/// Clips `subject` against the convex counter-clockwise `clip` polygon.
pub fn clip_convex(subject: &Polygon, clip: &Polygon) -> Polygon {
    let mut output = subject.vertices.clone();
    let n = clip.vertices.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip.vertices[i];
        let b = clip.vertices[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().unwrap();
        let mut prev_in = cross(a, b, prev) >= -CLIP_EPS;
        for &cur in &input {
            let cur_in = cross(a, b, cur) >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
            prev = cur;
            prev_in = cur_in;
        }
    }
    Polygon::new(output)
}

/// Area of the intersection of two convex counter-clockwise polygons.
pub fn intersection_area(a: &Polygon, b: &Polygon) -> f64 {
    let area = clip_convex(a, b).area();
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

/// Ground-plane box in the LiDAR frame. `l` runs along the heading `yaw`,
/// `w` across it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBevBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

impl OrientedBevBox {
    /// Validates extents and wraps the yaw to `(-pi, pi]`.
    pub fn new(cx: f64, cy: f64, w: f64, l: f64, yaw: f64) -> Result<Self, GeometryError> {
        if !(w > 0.0 && l > 0.0 && w.is_finite() && l.is_finite()) {
            return Err(GeometryError::InvalidExtent { w, l });
        }
        if !(cx.is_finite() && cy.is_finite() && yaw.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(OrientedBevBox { cx, cy, w, l, yaw: wrap_angle(yaw) })
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Distance of the center from the sensor origin.
    pub fn range(&self) -> f64 {
        self.cx.hypot(self.cy)
    }

    /// Corners `center + R(yaw) * (+-l/2, +-w/2)`, counter-clockwise.
    pub fn polygon(&self) -> Polygon {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
        Polygon::new(
            local
                .iter()
                .map(|&(dx, dy)| Point2::new(self.cx + c * dx - s * dy, self.cy + s * dx + c * dy))
                .collect(),
        )
    }

    fn circumradius(&self) -> f64 {
        self.w.hypot(self.l) / 2.0
    }
}

/// See [`OrientedBevBox::polygon`].
pub fn box_polygon(b: &OrientedBevBox) -> Polygon {
    b.polygon()
}

/// Dilation factor `1 + alpha * d / d_max`.
pub fn dilation_scale(d: f64, alpha: f64, d_max: f64) -> f64 {
    1.0 + alpha * d / d_max
}

/// Isotropic, range-dependent dilation about the polygon centroid.
pub fn dilate_polygon(poly: &Polygon, d: f64, alpha: f64, d_max: f64) -> Polygon {
    poly.scaled(dilation_scale(d, alpha, d_max))
}

/// Intersection-over-union of two oriented boxes.
pub fn rotated_iou(a: &OrientedBevBox, b: &OrientedBevBox) -> f64 {
    let reach = a.circumradius() + b.circumradius();
    if (a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2) > reach * reach {
        return 0.0;
    }
    let inter = intersection_area(&a.polygon(), &b.polygon());
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Footprint plus vertical extent, LiDAR frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub footprint: OrientedBevBox,
    pub z_bottom: f64,
    pub z_top: f64,
}

impl Box3D {
    pub fn height(&self) -> f64 {
        self.z_top - self.z_bottom
    }

    pub fn volume(&self) -> f64 {
        self.footprint.area() * self.height()
    }
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let overlap_z = a.z_top.min(b.z_top) - a.z_bottom.max(b.z_bottom);
    if overlap_z <= 0.0 {
        return 0.0;
    }
    let inter_area = intersection_area(&a.footprint.polygon(), &b.footprint.polygon());
    let inter = inter_area * overlap_z;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: OrientedBevBox,
    pub score: f64,
    pub class: ObjectClass,
}

/// Indices sorted by descending score, ties by ascending index.
pub fn score_order(scores: impl ExactSizeIterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy rotated NMS, applied within each class independently.
///
/// A box is dropped iff its IoU with an already kept box of the same class
/// exceeds `iou_thresh`. The result is ordered by descending score.
pub fn nms_rotated(dets: &[ScoredBox], iou_thresh: f64) -> Vec<ScoredBox> {
    nms_rotated_indices(dets, iou_thresh).into_iter().map(|i| dets[i]).collect()
}

/// Indices kept by [`nms_rotated`], in keep order.
pub fn nms_rotated_indices(dets: &[ScoredBox], iou_thresh: f64) -> Vec<usize> {
    let order = score_order(dets.iter().map(|d| d.score));
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && dets[j].class == dets[i].class && rotated_iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}
