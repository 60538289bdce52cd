//! Axis-aligned box arithmetic and mask-to-box derivation.
//!
//! Boxes use the continuous-area convention (`x`, `y` top-left, `w`, `h` extents
//! in pixels). The discrete `+1` convention applies only when a box is derived
//! from a segmentation mask.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Builds a box, rejecting negative origins, non-positive extents and non-finite values.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidInput(format!(
                "invalid box (x={x}, y={y}, w={w}, h={h})"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// `[x, y, w, h]` as stored in dataset records.
    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b && a.area() > 0.0 {
        return 1.0;
    }
    let overlap_w = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let overlap_h = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = overlap_w * overlap_h;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// True iff `inner` lies within `outer` grown by `slack` on every side.
pub fn contains(outer: &BBox, inner: &BBox, slack: f64) -> bool {
    inner.x >= outer.x - slack
        && inner.y >= outer.y - slack
        && inner.right() <= outer.right() + slack
        && inner.bottom() <= outer.bottom() + slack
}

/// Row-major binary segmentation mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask has {} bits, expected {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    /// Loads a mask from a grayscale image; any value above zero is set.
    pub fn from_image(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?
            .to_luma8();
        let (w, h) = img.dimensions();
        let bits = img.as_raw().iter().map(|&v| v > 0).collect();
        Mask::new(w as usize, h as usize, bits)
    }

    /// Parses the run-length JSON form `{"width":W,"height":H,"rle":[[runs...], ...]}`.
    ///
    /// Each row lists run lengths alternating unset/set, starting with unset
    /// (a leading zero run is allowed), and must sum to `width`.
    pub fn from_rle_json(text: &str) -> Result<Self> {
        let rec: RleMask = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("mask record: {e}")))?;
        if rec.rle.len() != rec.height {
            return Err(Error::InvalidInput(format!(
                "mask rle has {} rows, expected {}",
                rec.rle.len(),
                rec.height
            )));
        }
        let mut bits = Vec::with_capacity(rec.width * rec.height);
        for (r, runs) in rec.rle.iter().enumerate() {
            let mut set = false;
            let mut n = 0;
            for &run in runs {
                bits.extend(std::iter::repeat_n(set, run));
                n += run;
                set = !set;
            }
            if n != rec.width {
                return Err(Error::InvalidInput(format!(
                    "mask rle row {r} covers {n} pixels, expected {}",
                    rec.width
                )));
            }
        }
        Mask::new(rec.width, rec.height, bits)
    }

    /// Inverse of [`Mask::from_rle_json`].
    pub fn to_rle_json(&self) -> String {
        let rle = (0..self.height)
            .map(|r| {
                let mut runs = Vec::new();
                let mut current = false;
                let mut len = 0;
                for c in 0..self.width {
                    let v = self.get(r, c);
                    if v == current {
                        len += 1;
                    } else {
                        runs.push(len);
                        current = v;
                        len = 1;
                    }
                }
                runs.push(len);
                runs
            })
            .collect();
        serde_json::to_string(&RleMask {
            width: self.width,
            height: self.height,
            rle,
        })
        .expect("mask serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct RleMask {
    width: usize,
    height: usize,
    rle: Vec<Vec<usize>>,
}

/// Tight box over set bits (`w = max_col - min_col + 1`), or `None` for an empty mask.
pub fn mask_to_bbox(m: &Mask) -> Option<BBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..m.height {
        for c in 0..m.width {
            if m.get(r, c) {
                bounds = Some(match bounds {
                    None => (c, r, c, r),
                    Some((c0, r0, c1, r1)) => (c0.min(c), r0.min(r), c1.max(c), r1.max(r)),
                });
            }
        }
    }
    bounds.map(|(c0, r0, c1, r1)| BBox {
        x: c0 as f64,
        y: r0 as f64,
        w: (c1 - c0 + 1) as f64,
        h: (r1 - r0 + 1) as f64,
    })
}
