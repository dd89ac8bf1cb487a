//! Normalized-frame geometry: points and boxes in `[0,1]²`.

use serde::{Deserialize, Serialize};

use crate::action::PixelPoint;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("screen dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("no points or boxes to aggregate")]
    EmptyInput,
    #[error("invalid box [{0}, {1}, {2}, {3}]: need 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1")]
    InvalidBox(f64, f64, f64, f64),
}

/// Point in the normalized frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Coordinate {
    pub x: f64,
    pub y: f64,
}

impl Coordinate {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn clamped(self) -> Self {
        Self::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }

    pub fn to_pixels(self, width: u32, height: u32) -> PixelPoint {
        PixelPoint::new(self.x * f64::from(width), self.y * f64::from(height))
    }
}

impl From<[f64; 2]> for Coordinate {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Coordinate> for [f64; 2] {
    fn from(c: Coordinate) -> Self {
        [c.x, c.y]
    }
}

/// Axis-aligned box `[x1, y1, x2, y2]` in the normalized frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const FULL: BBox = BBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let ok = [x1, y1, x2, y2].iter().all(|v| (0.0..=1.0).contains(v)) && x1 <= x2 && y1 <= y2;
        if ok {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(GeometryError::InvalidBox(x1, y1, x2, y2))
        }
    }

    pub fn point(c: Coordinate) -> Self {
        Self {
            x1: c.x,
            y1: c.y,
            x2: c.x,
            y2: c.y,
        }
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

    pub fn contains(&self, c: Coordinate) -> bool {
        (self.x1..=self.x2).contains(&c.x) && (self.y1..=self.y2).contains(&c.y)
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn corners(&self) -> [Coordinate; 2] {
        [Coordinate::new(self.x1, self.y1), Coordinate::new(self.x2, self.y2)]
    }

    /// Maps `inner`, expressed relative to this box, back into this box's frame.
    pub fn compose(&self, inner: &BBox) -> BBox {
        let (w, h) = (self.width(), self.height());
        BBox {
            x1: self.x1 + inner.x1 * w,
            y1: self.y1 + inner.y1 * h,
            x2: self.x1 + inner.x2 * w,
            y2: self.y1 + inner.y2 * h,
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from([x1, y1, x2, y2]: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(x1, y1, x2, y2)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Pixel position to normalized coordinate, clamped to the frame.
pub fn normalize(pixel: PixelPoint, width: u32, height: u32) -> Result<Coordinate, GeometryError> {
    if width == 0 || height == 0 {
        return Err(GeometryError::ZeroDimension { width, height });
    }
    Ok(Coordinate::new(pixel.x / f64::from(width), pixel.y / f64::from(height)).clamped())
}

/// Euclidean distance between normalized points; lies in `[0, √2]`.
pub fn d_norm(predicted: Coordinate, target: Coordinate) -> f64 {
    (predicted.x - target.x).hypot(predicted.y - target.y)
}

/// Smallest axis-aligned box containing every point and every box.
pub fn union_box(points: &[Coordinate], boxes: &[BBox]) -> Result<BBox, GeometryError> {
    let corners = boxes.iter().flat_map(|b| b.corners());
    let mut all = points.iter().copied().chain(corners);
    let first = all.next().ok_or(GeometryError::EmptyInput)?;
    let init = BBox::point(first);
    Ok(all.fold(init, |b, c| BBox {
        x1: b.x1.min(c.x),
        y1: b.y1.min(c.y),
        x2: b.x2.max(c.x),
        y2: b.y2.max(c.y),
    }))
}

/// Pads every side by `pad`, widens any side shorter than `min_side`
/// symmetrically, then clamps into the unit frame. A side that clamping would
/// cut below `min(min_side, 1)` is slid back inside instead of shrunk.
pub fn pad_and_clamp(b: BBox, pad: f64, min_side: f64) -> BBox {
    let (x1, x2) = pad_axis(b.x1, b.x2, pad, min_side);
    let (y1, y2) = pad_axis(b.y1, b.y2, pad, min_side);
    BBox { x1, y1, x2, y2 }
}

fn pad_axis(lo: f64, hi: f64, pad: f64, min_side: f64) -> (f64, f64) {
    let min_side = min_side.min(1.0);
    let (mut lo, mut hi) = (lo - pad, hi + pad);
    if hi - lo < min_side {
        let center = 0.5 * (lo + hi);
        // min/max keeps the original extent even when rounding nudges the center
        lo = lo.min(center - 0.5 * min_side);
        hi = hi.max(center + 0.5 * min_side);
    }
    if lo >= 0.0 && hi <= 1.0 {
        return (lo, hi);
    }
    let (c_lo, c_hi) = (lo.max(0.0), hi.min(1.0));
    if c_hi - c_lo >= min_side - 1e-12 {
        (c_lo, c_hi)
    } else if lo < 0.0 {
        (0.0, min_side)
    } else {
        (1.0 - min_side, 1.0)
    }
}
