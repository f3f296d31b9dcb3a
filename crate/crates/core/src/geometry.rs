//! Normalized bounding-box geometry: corner/center conversion, IoU, the
//! SSD offset encoding and the smooth-L1 kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in corner form, normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCorner {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

/// Box in center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCenter {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Regression target of a box relative to a default box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OffsetVector {
    pub t_cx: f64,
    pub t_cy: f64,
    pub t_w: f64,
    pub t_h: f64,
}

impl BoxCorner {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        BoxCorner {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
            && self.xmin <= self.xmax
            && self.ymin <= self.ymax
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0)) * (self.height().max(0.0))
    }

    pub fn clip_unit(&self) -> BoxCorner {
        BoxCorner {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn to_center(&self) -> Result<BoxCenter> {
        corner_to_center(*self)
    }
}

impl BoxCenter {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCenter { cx, cy, w, h }
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn to_corner(&self) -> BoxCorner {
        center_to_corner(*self)
    }
}

impl OffsetVector {
    pub fn new(t_cx: f64, t_cy: f64, t_w: f64, t_h: f64) -> Self {
        OffsetVector {
            t_cx,
            t_cy,
            t_w,
            t_h,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.t_cx, self.t_cy, self.t_w, self.t_h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        OffsetVector::new(a[0], a[1], a[2], a[3])
    }
}

pub fn corner_to_center(b: BoxCorner) -> Result<BoxCenter> {
    if !b.is_valid() || b.xmax <= b.xmin || b.ymax <= b.ymin {
        return Err(Error::DegenerateBox(format!("{b:?}")));
    }
    Ok(BoxCenter {
        cx: (b.xmin + b.xmax) / 2.0,
        cy: (b.ymin + b.ymax) / 2.0,
        w: b.xmax - b.xmin,
        h: b.ymax - b.ymin,
    })
}

pub fn center_to_corner(b: BoxCenter) -> BoxCorner {
    BoxCorner {
        xmin: b.cx - b.w / 2.0,
        ymin: b.cy - b.h / 2.0,
        xmax: b.cx + b.w / 2.0,
        ymax: b.cy + b.h / 2.0,
    }
}

/// Intersection over union. Zero-area inputs give 0.
pub fn iou(a: &BoxCorner, b: &BoxCorner) -> f64 {
    let iw = a.xmax.min(b.xmax) - a.xmin.max(b.xmin);
    let ih = a.ymax.min(b.ymax) - a.ymin.max(b.ymin);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Encodes ground truth `g` relative to default box `d` (no variance scaling).
pub fn encode_box(g: BoxCenter, d: BoxCenter) -> Result<OffsetVector> {
    BoxCoder::default().encode(g, d)
}

pub fn decode_box(t: OffsetVector, d: BoxCenter) -> Result<BoxCenter> {
    BoxCoder::default().decode(t, d)
}

/// Box encoder with an optional per-component scale. The encoded offsets
/// are divided by `scales`; the default of all ones leaves them untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxCoder {
    pub scales: [f64; 4],
}

impl Default for BoxCoder {
    fn default() -> Self {
        BoxCoder { scales: [1.0; 4] }
    }
}

impl BoxCoder {
    pub fn with_scales(scales: [f64; 4]) -> Result<Self> {
        if scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "box coder scales must be positive, got {scales:?}"
            )));
        }
        Ok(BoxCoder { scales })
    }

    pub fn encode(&self, g: BoxCenter, d: BoxCenter) -> Result<OffsetVector> {
        if !g.is_valid() || !d.is_valid() {
            return Err(Error::DegenerateBox(format!(
                "cannot encode {g:?} against {d:?}"
            )));
        }
        let [s0, s1, s2, s3] = self.scales;
        Ok(OffsetVector {
            t_cx: (g.cx - d.cx) / d.w / s0,
            t_cy: (g.cy - d.cy) / d.h / s1,
            t_w: (g.w / d.w).ln() / s2,
            t_h: (g.h / d.h).ln() / s3,
        })
    }

    pub fn decode(&self, t: OffsetVector, d: BoxCenter) -> Result<BoxCenter> {
        if !d.is_valid() {
            return Err(Error::DegenerateBox(format!("default box {d:?}")));
        }
        let [s0, s1, s2, s3] = self.scales;
        let out = BoxCenter {
            cx: t.t_cx * s0 * d.w + d.cx,
            cy: t.t_cy * s1 * d.h + d.cy,
            w: d.w * (t.t_w * s2).exp(),
            h: d.h * (t.t_h * s3).exp(),
        };
        if ![out.cx, out.cy, out.w, out.h].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteResult(format!(
                "decoding {t:?} against {d:?}"
            )));
        }
        Ok(out)
    }

    /// Decodes and returns the corner form clipped to the unit square.
    pub fn decode_clipped(&self, t: OffsetVector, d: BoxCenter) -> Result<BoxCorner> {
        Ok(self.decode(t, d)?.to_corner().clip_unit())
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1`]; always within [-1, 1].
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
