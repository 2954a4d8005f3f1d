//! Axis-aligned box arithmetic, binary masks, and run-length codecs.
//!
//! Coordinates are continuous with the half-open pixel convention: a box
//! `[x, y, w, h]` covers `[x, x+w) x [y, y+h)`, and pixel `(px, py)` is the
//! unit square `[px, px+1) x [py, py+1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x, y, w, h]` with `w >= 0`, `h >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// True iff `other` lies entirely inside `self` (closed comparison on
    /// the shared edges).
    pub fn contains_box(&self, other: &BBox) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.x + self.w >= other.x + other.w
            && self.y + self.h >= other.y + other.h
    }

    /// Clip to the image rectangle `[0, width) x [0, height)`.
    pub fn clipped(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.max(0.0).min(width);
        let y0 = self.y.max(0.0).min(height);
        let x1 = (self.x + self.w).max(0.0).min(width);
        let y1 = (self.y + self.h).max(0.0).min(height);
        BBox::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Annotated point with its class and per-scene instance identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub class_id: usize,
    pub instance_id: i64,
}

impl Point {
    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Intersection-over-union of two boxes; 0 when the union has zero area.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// True iff the point lies inside the box under the half-open convention.
pub fn point_in_box(px: f64, py: f64, b: &BBox) -> bool {
    px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h
}

/// Dense binary mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BitMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BitMask {
    pub fn new(width: usize, height: usize) -> Self {
        BitMask { width, height, bits: vec![false; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Rasterize a box: pixel (x, y) is set iff its integer coordinate lies
    /// in the half-open box extent.
    pub fn from_box(width: usize, height: usize, b: &BBox) -> Self {
        let mut m = BitMask::new(width, height);
        let x0 = b.x.ceil().max(0.0) as usize;
        let y0 = b.y.ceil().max(0.0) as usize;
        let x1 = (b.x + b.w).ceil().min(width as f64).max(0.0) as usize;
        let y1 = (b.y + b.h).ceil().min(height as f64).max(0.0) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                if (x as f64) >= b.x && (x as f64) < b.x + b.w && (y as f64) >= b.y && (y as f64) < b.y + b.h {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Number of foreground pixels with at least one background (or
    /// out-of-image) 4-neighbor.
    pub fn perimeter(&self) -> usize {
        let mut p = 0;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == self.width
                    || y + 1 == self.height
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1);
                if edge {
                    p += 1;
                }
            }
        }
        p
    }
}

/// Set IoU of two masks of equal dimensions; 0 when both are empty.
pub fn mask_iou(a: &BitMask, b: &BitMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension(format!(
            "mask_iou: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (pa, pb) in a.bits.iter().zip(&b.bits) {
        if *pa && *pb {
            inter += 1;
        }
        if *pa || *pb {
            union += 1;
        }
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Tightest box covering all foreground pixels; `None` for an empty mask.
pub fn mask_to_box(m: &BitMask) -> Option<BBox> {
    let mut min_x = usize::MAX;
    let mut min_y = usize::MAX;
    let mut max_x = 0usize;
    let mut max_y = 0usize;
    let mut any = false;
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(x, y) {
                any = true;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    if !any {
        return None;
    }
    Some(BBox::new(
        min_x as f64,
        min_y as f64,
        (max_x - min_x + 1) as f64,
        (max_y - min_y + 1) as f64,
    ))
}

/// Column-major run-length encoding starting with the zero run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rle {
    pub counts: Vec<u32>,
}

/// Encode a mask column-major (down each column, left to right), with the
/// first count always describing a (possibly empty) run of zeros.
pub fn rle_encode(m: &BitMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..m.width {
        for y in 0..m.height {
            let bit = m.get(x, y);
            if bit == current {
                run += 1;
            } else {
                counts.push(run);
                current = bit;
                run = 1;
            }
        }
    }
    counts.push(run);
    if counts.is_empty() {
        counts.push(0);
    }
    Rle { counts }
}

/// Decode a column-major RLE into a `w x h` mask. The counts must sum to
/// exactly `w * h`.
pub fn rle_decode(rle: &Rle, width: usize, height: usize) -> Result<BitMask> {
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (width * height) as u64 {
        return Err(Error::format(
            "rle",
            format!("counts sum {} != {}x{}={}", total, width, height, width * height),
        ));
    }
    let mut m = BitMask::new(width, height);
    let mut idx = 0usize;
    let mut value = false;
    for &count in &rle.counts {
        for _ in 0..count {
            let x = idx / height;
            let y = idx % height;
            m.set(x, y, value);
            idx += 1;
        }
        value = !value;
    }
    Ok(m)
}
