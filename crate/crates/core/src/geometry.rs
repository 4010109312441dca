//! Axis-aligned boxes in normalized image coordinates.
//!
//! Corners follow the image convention: `(x1, y1)` is the top-left corner and
//! `y` grows downward. Every formula here is symmetric in that choice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-parametrized box with all coordinates in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y1)
            && (0.0..=1.0).contains(&x2)
            && (0.0..=1.0).contains(&y2)
            && x1 <= x2
            && y1 <= y2;
        if ok {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    /// Clamps every coordinate into the unit interval and orders the corners.
    pub fn clamped(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        let (x1, x2) = (c(x1), c(x2));
        let (y1, y2) = (c(y1), c(y2));
        Self {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub const UNIT: BBox = BBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }
    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }
    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    /// Smallest box containing both.
    pub fn enclose(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    /// True when `other` lies inside `self` (per-coordinate containment).
    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Scales the box about its center by `factor` in both dimensions.
    pub fn shrink(&self, factor: f64) -> BBox {
        // inset form keeps factor 1 exact and the result inside `self`
        let dx = 0.5 * (1.0 - factor) * self.width();
        let dy = 0.5 * (1.0 - factor) * self.height();
        BBox::clamped(self.x1 + dx, self.y1 + dy, self.x2 - dx, self.y2 - dy)
    }

    pub fn transpose(&self) -> BBox {
        BBox {
            x1: self.y1,
            y1: self.x1,
            x2: self.y2,
            y2: self.x2,
        }
    }

    pub fn to_center(&self) -> CenterBox {
        corner_to_center(self)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

/// Center/size parametrization produced by the box head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_corner(&self) -> BBox {
        center_to_corner(self)
    }
}

/// Converts to corners, clamping each corner into `[0, 1]`.
pub fn center_to_corner(c: &CenterBox) -> BBox {
    let w = c.w.max(0.0);
    let h = c.h.max(0.0);
    BBox::clamped(
        c.cx - 0.5 * w,
        c.cy - 0.5 * h,
        c.cx + 0.5 * w,
        c.cy + 0.5 * h,
    )
}

pub fn corner_to_center(b: &BBox) -> CenterBox {
    CenterBox {
        cx: 0.5 * (b.x1 + b.x2),
        cy: 0.5 * (b.y1 + b.y2),
        w: b.x2 - b.x1,
        h: b.y2 - b.y1,
    }
}

/// Intersection over union. Zero when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (|C| - |A u B|) / |C|` with `C` the enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Err(Error::DegeneratePair);
    }
    let enclosing = a.enclose(b).area();
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// Gradient of [`giou`] with respect to the four corners of `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiouGradient {
    pub value: f64,
    pub grad: [f64; 4],
    /// Set when some edge of `a` coincides with an edge of `b` on the same
    /// axis. The gradient is then the one-sided derivative taken in the
    /// direction that shrinks `a` (x1/y1 increasing, x2/y2 decreasing).
    pub nonsmooth: bool,
}

pub fn giou_gradient(a: &BBox, b: &BBox) -> Result<GiouGradient> {
    let [ax1, ay1, ax2, ay2] = a.coords();
    let [bx1, by1, bx2, by2] = b.coords();

    let nonsmooth = [ax1, ax2].iter().any(|&v| v == bx1 || v == bx2)
        || [ay1, ay2].iter().any(|&v| v == by1 || v == by2);

    // Partial derivatives of the intersection extents. Ties in min/max are
    // resolved towards `a` for the intersection and towards `b` for the
    // enclosing box.
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    let diw = [
        if ax1 >= bx1 { -1.0 } else { 0.0 },
        0.0,
        if ax2 <= bx2 { 1.0 } else { 0.0 },
        0.0,
    ];
    let dih = [
        0.0,
        if ay1 >= by1 { -1.0 } else { 0.0 },
        0.0,
        if ay2 <= by2 { 1.0 } else { 0.0 },
    ];
    let (inter, dinter) = if iw > 0.0 && ih > 0.0 {
        let mut d = [0.0; 4];
        for k in 0..4 {
            d[k] = diw[k] * ih + iw * dih[k];
        }
        (iw * ih, d)
    } else {
        (0.0, [0.0; 4])
    };

    let aw = ax2 - ax1;
    let ah = ay2 - ay1;
    let darea = [-ah, -aw, ah, aw];
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Err(Error::DegeneratePair);
    }
    let mut dunion = [0.0; 4];
    for k in 0..4 {
        dunion[k] = darea[k] - dinter[k];
    }

    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let dcw = [
        if ax1 < bx1 { -1.0 } else { 0.0 },
        0.0,
        if ax2 > bx2 { 1.0 } else { 0.0 },
        0.0,
    ];
    let dch = [
        0.0,
        if ay1 < by1 { -1.0 } else { 0.0 },
        0.0,
        if ay2 > by2 { 1.0 } else { 0.0 },
    ];
    let enclosing = cw * ch;

    let value = inter / union - (enclosing - union) / enclosing;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let denc = dcw[k] * ch + cw * dch[k];
        grad[k] = (dinter[k] * union - inter * dunion[k]) / (union * union)
            + (dunion[k] * enclosing - union * denc) / (enclosing * enclosing);
    }
    Ok(GiouGradient {
        value,
        grad,
        nonsmooth,
    })
}
