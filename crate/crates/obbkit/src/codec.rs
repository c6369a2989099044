//! Complex-plane box codec: regression offsets carry `(sin, cos)` of the
//! angle difference instead of a raw angle, so targets stay continuous when
//! the underlying angle wraps at the `[-pi/2, pi/2)` boundary. Width and
//! height are never swapped during encode/decode; the long-side convention
//! is restored only in [`canonicalize`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ConvexPolygon, GeometryError, Point, OBB};

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("angle vector (sin, cos) is zero")]
    ZeroAngleVector,
    #[error("invalid box: {0}")]
    InvalidBox(#[from] GeometryError),
}

/// Six-component regression offsets of a box relative to an anchor:
/// rotated center deltas normalized by the anchor dims, log size ratios,
/// and the `(sin, cos)` pair of the angle difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaOffsets {
    pub t_x: f64,
    pub t_y: f64,
    pub t_w: f64,
    pub t_h: f64,
    pub t_sin: f64,
    pub t_cos: f64,
}

impl DeltaOffsets {
    pub fn new(t_x: f64, t_y: f64, t_w: f64, t_h: f64, t_sin: f64, t_cos: f64) -> Self {
        DeltaOffsets { t_x, t_y, t_w, t_h, t_sin, t_cos }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.t_x, self.t_y, self.t_w, self.t_h, self.t_sin, self.t_cos]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        DeltaOffsets::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }
}

/// Box as the six-element tuple `(x, y, w, h, sin, cos)`; the raw result of
/// decoding, before any side-swap or angle normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OBB6 {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub sin_t: f64,
    pub cos_t: f64,
}

impl OBB6 {
    pub fn from_obb(obb: &OBB) -> Self {
        let (sin_t, cos_t) = obb.theta().sin_cos();
        OBB6 { x: obb.cx(), y: obb.cy(), w: obb.w(), h: obb.h(), sin_t, cos_t }
    }

    /// Corner polygon of the rectangle this tuple describes, with `w` lying
    /// along the `atan2(sin, cos)` direction regardless of which side is
    /// longer.
    pub fn polygon(&self) -> ConvexPolygon {
        let theta = self.sin_t.atan2(self.cos_t);
        let (sin_t, cos_t) = theta.sin_cos();
        let hw = self.w * 0.5;
        let hh = self.h * 0.5;
        let corners = [(hw, hh), (-hw, hh), (-hw, -hh), (hw, -hh)];
        ConvexPolygon::new(
            corners
                .iter()
                .map(|&(u, v)| {
                    Point::new(self.x + u * cos_t - v * sin_t, self.y + u * sin_t + v * cos_t)
                })
                .collect(),
        )
        .expect("rectangle corners are convex")
    }
}

/// Offsets of a ground-truth box relative to an anchor: center deltas in the
/// anchor frame normalized by the anchor dims, log size ratios, and the
/// angle difference expanded to `(sin, cos)` via the subtraction identities.
pub fn encode(gt: &OBB, anchor: &OBB) -> DeltaOffsets {
    let (sin_a, cos_a) = anchor.theta().sin_cos();
    let (sin_g, cos_g) = gt.theta().sin_cos();
    let dx = gt.cx() - anchor.cx();
    let dy = gt.cy() - anchor.cy();
    DeltaOffsets {
        t_x: (dx * cos_a + dy * sin_a) / anchor.w(),
        t_y: (-dx * sin_a + dy * cos_a) / anchor.h(),
        t_w: (gt.w() / anchor.w()).ln(),
        t_h: (gt.h() / anchor.h()).ln(),
        t_sin: sin_g * cos_a - cos_g * sin_a,
        t_cos: cos_g * cos_a + sin_g * sin_a,
    }
}

/// Inverse of [`encode`]: maps offsets back through the anchor frame. The
/// `(sin, cos)` pair is rotated by the anchor angle and is deliberately not
/// renormalized here; arbitrary predicted offsets keep their norm until
/// [`canonicalize`].
pub fn decode(d: &DeltaOffsets, anchor: &OBB) -> OBB6 {
    let (sin_a, cos_a) = anchor.theta().sin_cos();
    OBB6 {
        x: d.t_x * anchor.w() * cos_a - d.t_y * anchor.h() * sin_a + anchor.cx(),
        y: d.t_x * anchor.w() * sin_a + d.t_y * anchor.h() * cos_a + anchor.cy(),
        w: anchor.w() * d.t_w.exp(),
        h: anchor.h() * d.t_h.exp(),
        sin_t: d.t_sin * cos_a + d.t_cos * sin_a,
        cos_t: d.t_cos * cos_a - d.t_sin * sin_a,
    }
}

/// Map a six-element tuple onto the canonical long-side box: rescale
/// `(sin, cos)` to unit norm, take `theta = atan2(sin, cos)`, swap the sides
/// (shifting theta by pi/2) when the stored `w` is the short one, and reduce
/// theta mod pi into `[-pi/2, pi/2)`. The described rectangle is unchanged.
pub fn canonicalize(b: &OBB6) -> Result<OBB, CodecError> {
    let norm = b.sin_t.hypot(b.cos_t);
    if norm == 0.0 || !norm.is_finite() {
        return Err(CodecError::ZeroAngleVector);
    }
    let theta = b.sin_t.atan2(b.cos_t);
    Ok(OBB::canonical(b.x, b.y, b.w, b.h, theta)?)
}
