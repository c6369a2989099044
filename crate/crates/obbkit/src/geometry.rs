//! Exact oriented-box geometry: polygon conversion, convex clipping, rotated
//! IoU, minimum-area enclosing rectangles, and a raster-grid IoU oracle.
//!
//! Conventions: x right, y up, angles in radians measured counter-clockwise
//! from the x axis. Boxes use the long-side definition: `w` is the long side,
//! `h` the short side, and `theta` (the angle between `w` and the x axis) is
//! confined to `[-pi/2, pi/2)`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Tolerance for on-edge vertex classification during clipping.
const CLIP_EPS: f64 = 1e-9;

/// Intersection areas below this are treated as zero (tangent boxes).
const AREA_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("matrix entry out of [0,1]: {0}")]
    InvalidIoUValue(f64),
}

/// 2D point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    fn dist(self, other: Point) -> f64 {
        let d = self.sub(other);
        (d.x * d.x + d.y * d.y).sqrt()
    }
}

/// z-component of the cross product (b - a) x (c - a).
fn cross(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Oriented bounding box in canonical long-side form.
///
/// Invariants are enforced at construction: `w >= h > 0`, all fields finite,
/// `theta` in `[-pi/2, pi/2)`. Corrupt inputs are rejected here rather than
/// surfacing later as silent zero IoUs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OBB {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
}

impl OBB {
    /// Strict constructor: fields must already satisfy the invariants.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self, GeometryError> {
        for (name, v) in [("cx", cx), ("cy", cy), ("w", w), ("h", h), ("theta", theta)] {
            if !v.is_finite() {
                return Err(GeometryError::InvalidBox(format!("{name} = {v} not finite")));
            }
        }
        if h <= 0.0 {
            return Err(GeometryError::InvalidBox(format!("h = {h} must be > 0")));
        }
        if w < h {
            return Err(GeometryError::InvalidBox(format!(
                "w = {w} < h = {h} (long-side convention)"
            )));
        }
        if !(-FRAC_PI_2..FRAC_PI_2).contains(&theta) {
            return Err(GeometryError::InvalidBox(format!(
                "theta = {theta} outside [-pi/2, pi/2)"
            )));
        }
        Ok(OBB { cx, cy, w, h, theta })
    }

    /// Lenient constructor: swaps sides into long-side order (rotating theta
    /// by pi/2) and reduces theta mod pi into `[-pi/2, pi/2)`. Non-positive
    /// dimensions are still rejected.
    pub fn canonical(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self, GeometryError> {
        if !(w.is_finite() && h.is_finite() && theta.is_finite()) {
            return Err(GeometryError::InvalidBox("non-finite field".into()));
        }
        if !(w > 0.0 && h > 0.0) {
            return Err(GeometryError::InvalidBox(format!(
                "dimensions must be positive, got w = {w}, h = {h}"
            )));
        }
        let (w, h, theta) = if w >= h { (w, h, theta) } else { (h, w, theta + FRAC_PI_2) };
        OBB::new(cx, cy, w, h, reduce_angle_half_open(theta))
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    /// Long side.
    pub fn w(&self) -> f64 {
        self.w
    }

    /// Short side.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Angle of the long side in `[-pi/2, pi/2)`.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.w / self.h
    }

    /// Membership test in the box frame (rotate by -theta, compare against
    /// half-extents). The boundary counts as inside.
    pub fn contains_point(&self, p: Point) -> bool {
        let (sin_t, cos_t) = self.theta.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        let u = dx * cos_t + dy * sin_t;
        let v = -dx * sin_t + dy * cos_t;
        u.abs() <= self.w * 0.5 && v.abs() <= self.h * 0.5
    }

    fn as_tuple(&self) -> (f64, f64, f64, f64, f64) {
        (self.cx, self.cy, self.w, self.h, self.theta)
    }
}

// OBBs travel through JSON as the flat `[cx, cy, w, h, theta]` array; values
// are canonicalized (side swap, angle reduction) on the way in.
impl Serialize for OBB {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.cx, self.cy, self.w, self.h, self.theta].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for OBB {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [cx, cy, w, h, theta] = <[f64; 5]>::deserialize(deserializer)?;
        OBB::canonical(cx, cy, w, h, theta).map_err(D::Error::custom)
    }
}

/// Convex polygon as a counter-clockwise vertex chain. May be empty (the
/// result of clipping disjoint shapes). Chains with fewer than 3 vertices
/// have zero area.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    /// Validates convexity and counter-clockwise orientation.
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        let n = vertices.len();
        if n >= 3 {
            for i in 0..n {
                let a = vertices[i];
                let b = vertices[(i + 1) % n];
                let c = vertices[(i + 2) % n];
                if cross(a, b, c) < -CLIP_EPS {
                    return Err(GeometryError::InvalidPolygon(format!(
                        "reflex or clockwise turn at vertex {}",
                        (i + 1) % n
                    )));
                }
            }
        }
        Ok(ConvexPolygon { vertices })
    }

    pub fn empty() -> Self {
        ConvexPolygon { vertices: Vec::new() }
    }

    /// Construction bypass for vertices that are convex by construction
    /// (box corners, clipper output).
    fn from_ccw_unchecked(vertices: Vec<Point>) -> Self {
        ConvexPolygon { vertices }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.vertices.is_empty() {
            return None;
        }
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Some(Point::new(sx / n, sy / n))
    }

    /// Smallest over cyclic alignments of the maximum vertex distance.
    /// Infinite when the vertex counts differ. Used to compare polygons that
    /// should be geometrically identical (e.g. codec roundtrips).
    pub fn max_vertex_distance(&self, other: &ConvexPolygon) -> f64 {
        let n = self.vertices.len();
        if n != other.vertices.len() {
            return f64::INFINITY;
        }
        if n == 0 {
            return 0.0;
        }
        (0..n)
            .map(|shift| {
                (0..n)
                    .map(|i| self.vertices[i].dist(other.vertices[(i + shift) % n]))
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Corner polygon of a box: 4 CCW vertices starting from the (+w/2, +h/2)
/// corner in the box frame.
pub fn obb_to_polygon(obb: &OBB) -> ConvexPolygon {
    let (sin_t, cos_t) = obb.theta.sin_cos();
    let hw = obb.w * 0.5;
    let hh = obb.h * 0.5;
    let corners = [(hw, hh), (-hw, hh), (-hw, -hh), (hw, -hh)];
    let vertices = corners
        .iter()
        .map(|&(u, v)| Point::new(obb.cx + u * cos_t - v * sin_t, obb.cy + u * sin_t + v * cos_t))
        .collect();
    ConvexPolygon::from_ccw_unchecked(vertices)
}

/// Shoelace area; zero for chains with fewer than 3 vertices.
pub fn polygon_area(polygon: &ConvexPolygon) -> f64 {
    let v = polygon.vertices();
    if v.len() < 3 {
        return 0.0;
    }
    let mut twice_area = 0.0;
    for i in 0..v.len() {
        let a = v[i];
        let b = v[(i + 1) % v.len()];
        twice_area += a.x * b.y - b.x * a.y;
    }
    (twice_area * 0.5).max(0.0)
}

/// Sutherland-Hodgman clipping of `subject` against convex `clip`.
/// Returns the empty polygon when the inputs are disjoint.
pub fn convex_intersect(subject: &ConvexPolygon, clip: &ConvexPolygon) -> ConvexPolygon {
    if subject.len() < 3 || clip.len() < 3 {
        return ConvexPolygon::empty();
    }
    let mut output = subject.vertices().to_vec();
    let cv = clip.vertices();
    for i in 0..cv.len() {
        let a = cv[i];
        let b = cv[(i + 1) % cv.len()];
        let input = std::mem::take(&mut output);
        if input.is_empty() {
            break;
        }
        for j in 0..input.len() {
            let s = input[(j + input.len() - 1) % input.len()];
            let e = input[j];
            // >= -eps keeps on-edge vertices, matching the membership test.
            let s_in = cross(a, b, s) >= -CLIP_EPS;
            let e_in = cross(a, b, e) >= -CLIP_EPS;
            if e_in {
                if !s_in {
                    output.push(line_segment_intersection(a, b, s, e));
                }
                output.push(e);
            } else if s_in {
                output.push(line_segment_intersection(a, b, s, e));
            }
        }
    }
    let cleaned = merge_collinear(output);
    if cleaned.len() < 3 {
        return ConvexPolygon::empty();
    }
    ConvexPolygon::from_ccw_unchecked(cleaned)
}

/// Intersection of segment (s, e) with the infinite line through (a, b).
fn line_segment_intersection(a: Point, b: Point, s: Point, e: Point) -> Point {
    let d = b.sub(a);
    let f = e.sub(s);
    let denom = d.x * f.y - d.y * f.x;
    if denom.abs() < f64::MIN_POSITIVE {
        return e;
    }
    let t = (d.x * (a.y - s.y) - d.y * (a.x - s.x)) / denom;
    Point::new(s.x + t * f.x, s.y + t * f.y)
}

/// Drop near-duplicate vertices and merge collinear runs so tangencies do
/// not leave degenerate slivers behind.
fn merge_collinear(mut v: Vec<Point>) -> Vec<Point> {
    // near-duplicate removal
    let mut dedup: Vec<Point> = Vec::with_capacity(v.len());
    for p in v.drain(..) {
        if dedup.last().is_none_or(|q| q.dist(p) > CLIP_EPS) {
            dedup.push(p);
        }
    }
    while dedup.len() >= 2 && dedup[0].dist(*dedup.last().unwrap()) <= CLIP_EPS {
        dedup.pop();
    }
    if dedup.len() < 3 {
        return dedup;
    }
    // collinear middle vertices: relative sine of the turn below tolerance
    let n = dedup.len();
    let mut keep = Vec::with_capacity(n);
    for i in 0..n {
        let p = dedup[(i + n - 1) % n];
        let v0 = dedup[i];
        let nx = dedup[(i + 1) % n];
        let turn = cross(p, v0, nx).abs();
        if turn > CLIP_EPS * p.dist(v0).max(1.0) * v0.dist(nx).max(1.0) {
            keep.push(v0);
        }
    }
    keep
}

/// Exact rotated IoU via polygon clipping: `|a n b| / (|a| + |b| - |a n b|)`.
///
/// Arguments are ordered canonically before clipping so the result is
/// bitwise symmetric. Intersection areas below 1e-12 count as zero.
pub fn rotated_iou(a: &OBB, b: &OBB) -> f64 {
    let (first, second) = if a.as_tuple() <= b.as_tuple() { (a, b) } else { (b, a) };
    let pa = obb_to_polygon(first);
    let pb = obb_to_polygon(second);
    let inter = polygon_area(&convex_intersect(&pa, &pb));
    if inter < AREA_EPS {
        return 0.0;
    }
    // Shoelace on both operands so that identical boxes cancel exactly.
    let union = polygon_area(&pa) + polygon_area(&pb) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU matrix with proposals as rows and ground truths as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl IoUMatrix {
    /// Row-major construction; every entry must lie in `[0, 1]`.
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.len() != rows * cols {
            return Err(GeometryError::DegenerateInput(format!(
                "expected {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GeometryError::InvalidIoUValue(bad));
        }
        Ok(IoUMatrix { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols);
        self.values[row * self.cols + col]
    }

    /// Max entry of a row with its column; ties break to the lowest column.
    /// `None` when there are no columns.
    pub fn row_max(&self, row: usize) -> Option<(usize, f64)> {
        if self.cols == 0 {
            return None;
        }
        let mut best = (0, self.get(row, 0));
        for col in 1..self.cols {
            let v = self.get(row, col);
            if v > best.1 {
                best = (col, v);
            }
        }
        Some(best)
    }
}

/// Pairwise rotated IoU between proposals (rows) and ground truths (columns).
pub fn iou_matrix(proposals: &[OBB], gts: &[OBB]) -> Result<IoUMatrix, GeometryError> {
    if proposals.is_empty() {
        return Err(GeometryError::EmptyInput("no proposals".into()));
    }
    if gts.is_empty() {
        return Err(GeometryError::EmptyInput("no ground truths".into()));
    }
    let mut values = Vec::with_capacity(proposals.len() * gts.len());
    for p in proposals {
        for g in gts {
            values.push(rotated_iou(p, g));
        }
    }
    IoUMatrix::from_values(proposals.len(), gts.len(), values)
}

/// Minimum-area enclosing rectangle of four points, by rotating calipers over
/// the convex hull edges. Collinear or coincident inputs are rejected.
pub fn min_area_rect(quad: &[Point; 4]) -> Result<OBB, GeometryError> {
    for p in quad {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(GeometryError::DegenerateInput("non-finite coordinate".into()));
        }
    }
    let hull = convex_hull(quad);
    if hull.len() < 3 {
        return Err(GeometryError::DegenerateInput(
            "points are collinear or coincident".into(),
        ));
    }

    let mut best: Option<(f64, f64, f64, f64, f64, f64)> = None; // (area, cx, cy, w, h, angle)
    for i in 0..hull.len() {
        let p = hull[i];
        let q = hull[(i + 1) % hull.len()];
        let len = p.dist(q);
        if len <= f64::MIN_POSITIVE {
            continue;
        }
        let dir = Point::new((q.x - p.x) / len, (q.y - p.y) / len);
        let nrm = Point::new(-dir.y, dir.x);
        let (mut umin, mut umax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for pt in &hull {
            let u = pt.x * dir.x + pt.y * dir.y;
            let v = pt.x * nrm.x + pt.y * nrm.y;
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        let du = umax - umin;
        let dv = vmax - vmin;
        let area = du * dv;
        if best.is_none_or(|(a, ..)| area < a) {
            let uc = (umin + umax) * 0.5;
            let vc = (vmin + vmax) * 0.5;
            let cx = uc * dir.x + vc * nrm.x;
            let cy = uc * dir.y + vc * nrm.y;
            best = Some((area, cx, cy, du, dv, dir.y.atan2(dir.x)));
        }
    }
    let (_, cx, cy, du, dv, angle) = best.unwrap();
    OBB::canonical(cx, cy, du, dv, angle)
        .map_err(|e| GeometryError::DegenerateInput(format!("degenerate rectangle: {e}")))
}

/// Andrew's monotone chain; returns the hull in CCW order.
fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| a.dist(*b) <= CLIP_EPS);
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Deterministic grid-sampling IoU estimate, used as an independent oracle
/// against [`rotated_iou`]. Samples the centers of a `samples_per_axis`
/// square grid over the joint bounding box of both corner polygons; error is
/// O(perimeter / samples).
pub fn raster_iou_oracle(a: &OBB, b: &OBB, samples_per_axis: usize) -> f64 {
    assert!(samples_per_axis >= 64, "oracle needs at least 64 samples per axis");
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for obb in [a, b] {
        for p in obb_to_polygon(obb).vertices() {
            xmin = xmin.min(p.x);
            xmax = xmax.max(p.x);
            ymin = ymin.min(p.y);
            ymax = ymax.max(p.y);
        }
    }
    let n = samples_per_axis;
    let gx = (xmax - xmin) / n as f64;
    let gy = (ymax - ymin) / n as f64;
    let (sin_a, cos_a) = a.theta().sin_cos();
    let (sin_b, cos_b) = b.theta().sin_cos();
    let (hwa, hha) = (a.w() * 0.5, a.h() * 0.5);
    let (hwb, hhb) = (b.w() * 0.5, b.h() * 0.5);
    let mut inter = 0u64;
    let mut union = 0u64;
    for iy in 0..n {
        let y = ymin + (iy as f64 + 0.5) * gy;
        for ix in 0..n {
            let x = xmin + (ix as f64 + 0.5) * gx;
            let dxa = x - a.cx();
            let dya = y - a.cy();
            let in_a = (dxa * cos_a + dya * sin_a).abs() <= hwa
                && (-dxa * sin_a + dya * cos_a).abs() <= hha;
            let dxb = x - b.cx();
            let dyb = y - b.cy();
            let in_b = (dxb * cos_b + dyb * sin_b).abs() <= hwb
                && (-dxb * sin_b + dyb * cos_b).abs() <= hhb;
            inter += (in_a && in_b) as u64;
            union += (in_a || in_b) as u64;
        }
    }
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Reduce an angle mod pi into `[-pi/2, pi/2)`.
pub(crate) fn reduce_angle_half_open(theta: f64) -> f64 {
    let mut reduced = theta - PI * (theta / PI).round();
    if reduced >= FRAC_PI_2 {
        reduced -= PI;
    }
    if reduced < -FRAC_PI_2 {
        reduced += PI;
    }
    reduced
}
