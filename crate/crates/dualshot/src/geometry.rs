//! Box arithmetic, IoU, offset encoding/decoding, and non-maximum suppression.
//!
//! Coordinates are corner-form continuous floats with the origin at the
//! top-left of the image; `width = x_max - x_min` (no +1 pixel convention).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Builds a box, checking `x_max >= x_min`, `y_max >= y_min` and finiteness.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox { x_min, y_min, x_max, y_max };
        if !b.is_valid() {
            return Err(Error::InvalidBox(format!(
                "({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(b)
    }

    /// Unchecked constructor for internal arithmetic that preserves validity.
    pub(crate) fn raw(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    /// Corner box from the WIDER `(x, y, w, h)` convention.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> (f64, f64, f64, f64) {
        (self.x_min, self.y_min, self.width(), self.height())
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_max >= self.x_min
            && self.y_max >= self.y_min
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Face size convention used by the samplers: `sqrt(w * h)`.
    pub fn size(&self) -> f64 {
        self.area().sqrt()
    }

    /// Square box of side `size` centered at `(cx, cy)`.
    pub fn centered_square(cx: f64, cy: f64, size: f64) -> Self {
        let h = 0.5 * size;
        BBox::raw(cx - h, cy - h, cx + h, cy + h)
    }

    /// Intersection rectangle, if the two boxes overlap at all.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        if x_max > x_min && y_max > y_min {
            Some(BBox::raw(x_min, y_min, x_max, y_max))
        } else {
            None
        }
    }

    /// Clamps the box to `[0, w] x [0, h]`.
    pub fn clamp_to(&self, w: f64, h: f64) -> BBox {
        BBox::raw(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
        )
    }

    /// Translates by `(dx, dy)`.
    pub fn shifted(&self, dx: f64, dy: f64) -> BBox {
        BBox::raw(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    /// Scales all coordinates by `f` (about the origin).
    pub fn scaled(&self, f: f64) -> BBox {
        BBox::raw(self.x_min * f, self.y_min * f, self.x_max * f, self.y_max * f)
    }

    /// Mirrors the box horizontally inside an image of width `w`.
    pub fn hflipped(&self, w: f64) -> BBox {
        BBox::raw(w - self.x_max, self.y_min, w - self.x_min, self.y_max)
    }
}

/// Intersection-over-union of two boxes. Disjoint or degenerate pairs give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = match a.intersection(b) {
        Some(r) => r.area(),
        None => return 0.0,
    };
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Center/size variances of the offset parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variances {
    pub center: f64,
    pub size: f64,
}

impl Default for Variances {
    fn default() -> Self {
        Variances { center: 0.1, size: 0.2 }
    }
}

/// Center offset in units of (anchor size x center variance) plus log-size
/// ratio in units of the size variance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EncodedOffset {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl EncodedOffset {
    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dw.is_finite() && self.dh.is_finite()
    }
}

/// Encodes `gt` relative to `anchor`. The anchor must have positive width and
/// height; the ground-truth box may be degenerate (its log ratio is then -inf,
/// which callers exclude by only encoding positive-area faces).
pub fn encode(gt: &BBox, anchor: &BBox, variances: Variances) -> Result<EncodedOffset> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(Error::InvalidBox(format!(
            "anchor must have positive dimensions, got {aw} x {ah}"
        )));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(EncodedOffset {
        dx: (gcx - acx) / (aw * variances.center),
        dy: (gcy - acy) / (ah * variances.center),
        dw: (gt.width() / aw).ln() / variances.size,
        dh: (gt.height() / ah).ln() / variances.size,
    })
}

/// Inverse of [`encode`]. No clamping is applied here; callers clamp to the
/// image when they need to.
pub fn decode(off: &EncodedOffset, anchor: &BBox, variances: Variances) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let cx = acx + off.dx * variances.center * aw;
    let cy = acy + off.dy * variances.center * ah;
    let w = aw * (off.dw * variances.size).exp();
    let h = ah * (off.dh * variances.size).exp();
    BBox::raw(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited in descending score order, ties broken by input order;
/// a box is kept when its IoU with every already-kept box is `<= threshold`.
/// The output is sorted by score descending and capped at `top_k`.
pub fn nms(boxes: &[(BBox, f64)], iou_threshold: f64, top_k: usize) -> Vec<(BBox, f64)> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // Stable sort keeps input order among equal scores.
    order.sort_by(|&a, &b| boxes[b].1.total_cmp(&boxes[a].1));

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.len() >= top_k {
            break;
        }
        let survives = kept
            .iter()
            .all(|&j| iou(&boxes[i].0, &boxes[j].0) <= iou_threshold);
        if survives {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| boxes[i]).collect()
}
