//! Box algebra in center/size coordinates.
//!
//! Boxes live in the four-dimensional space of (center x, center y, width,
//! height). Corner form `(x1, y1, x2, y2)` is only used for overlap and
//! clipping computations. The regression parametrization [`delta`] and its
//! inverse [`apply_delta`] are a scale-invariant translation plus a log-scale
//! change in width and height.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box stored as center and size, in pixels.
///
/// Width and height are strictly positive and every field is finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        BBox::new(raw.cx, raw.cy, raw.w, raw.h)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox { cx: b.cx, cy: b.cy, w: b.w, h: b.h }
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let finite = cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox { cx, cy, w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Build from corner coordinates `[x1, x2] x [y1, y2]`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    /// Whether the box lies inside `[0, width] x [0, height]` up to `tol`.
    pub fn is_inside(&self, width: f64, height: f64, tol: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x1 >= -tol && y1 >= -tol && x2 <= width + tol && y2 <= height + tol
    }
}

/// Parametrized change mapping one box onto another.
///
/// `tx`, `ty` are shifts relative to the source size; `tw`, `th` are log
/// ratios of the target size to the source size.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaParams {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl DeltaParams {
    pub const ZERO: DeltaParams = DeltaParams { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 };

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { tx: v[0], ty: v[1], tw: v[2], th: v[3] }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn is_finite(&self) -> bool {
        self.tx.is_finite() && self.ty.is_finite() && self.tw.is_finite() && self.th.is_finite()
    }

    /// Clamp the log-size components to `[-limit, limit]`.
    pub fn clamp_scale(self, limit: f64) -> Self {
        Self {
            tw: self.tw.clamp(-limit, limit),
            th: self.th.clamp(-limit, limit),
            ..self
        }
    }
}

/// Intersection over union. Boxes that only share an edge or a corner have
/// zero intersection area and therefore IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// The change that maps `b` onto `t`.
pub fn delta(b: &BBox, t: &BBox) -> DeltaParams {
    DeltaParams {
        tx: (t.cx - b.cx) / b.w,
        ty: (t.cy - b.cy) / b.h,
        tw: (t.w / b.w).ln(),
        th: (t.h / b.h).ln(),
    }
}

/// Project a parametrized change back into box space. Inverse of [`delta`].
///
/// The caller keeps `d` within a range where `exp` stays finite; detection
/// clamps the log-size components before calling this.
pub fn apply_delta(b: &BBox, d: &DeltaParams) -> BBox {
    let out = BBox {
        cx: b.cx + d.tx * b.w,
        cy: b.cy + d.ty * b.h,
        w: b.w * d.tw.exp(),
        h: b.h * d.th.exp(),
    };
    debug_assert!(
        BBox::new(out.cx, out.cy, out.w, out.h).is_ok(),
        "apply_delta produced an invalid box from {b:?} and {d:?}"
    );
    out
}

const CLIP_TOL: f64 = 1e-12;

/// Clamp a box to the image `[0, width] x [0, height]`.
///
/// A side that collapses below `min_side` after clamping is reset to
/// `min_side` around the clamped center and then shifted back inside the
/// image, so clipping is idempotent.
pub fn clip_to_image(b: &BBox, width: f64, height: f64, min_side: f64) -> BBox {
    // corners of an already clipped box can sit an ulp outside the image
    if b.is_inside(width, height, CLIP_TOL * width.max(height)) && b.w >= min_side.min(width) && b.h >= min_side.min(height) {
        return *b;
    }
    let (x1, y1, x2, y2) = b.corners();
    let (x1, x2) = clip_axis(x1, x2, width, min_side);
    let (y1, y2) = clip_axis(y1, y2, height, min_side);
    BBox {
        cx: 0.5 * (x1 + x2),
        cy: 0.5 * (y1 + y2),
        w: x2 - x1,
        h: y2 - y1,
    }
}

fn clip_axis(lo: f64, hi: f64, extent: f64, min_side: f64) -> (f64, f64) {
    let lo_c = lo.clamp(0.0, extent);
    let hi_c = hi.clamp(0.0, extent);
    if hi_c - lo_c >= min_side {
        return (lo_c, hi_c);
    }
    let side = min_side.min(extent);
    let center = 0.5 * (lo_c + hi_c);
    let start = (center - 0.5 * side).clamp(0.0, extent - side);
    (start, start + side)
}
