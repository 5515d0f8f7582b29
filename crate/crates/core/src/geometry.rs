//! Axis-aligned box arithmetic: IoU, area, shifting and greedy NMS.

use std::cmp::Ordering;

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x}, {y}, {w}, {h}): width and height must be positive and all coordinates finite")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("length mismatch: {boxes} boxes but {scores} scores")]
    LengthMismatch { boxes: usize, scores: usize },
}

/// Axis-aligned rectangle in image pixels, anchored at its top-left corner.
///
/// Width and height are strictly positive; the position may be negative or
/// lie outside the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    x: T,
    y: T,
    w: T,
    h: T,
}

impl<T: Real> BBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Result<Self, GeometryError> {
        let finite = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= T::zero() || h <= T::zero() {
            return Err(GeometryError::InvalidBox {
                x: x.to_f64().unwrap_or(f64::NAN),
                y: y.to_f64().unwrap_or(f64::NAN),
                w: w.to_f64().unwrap_or(f64::NAN),
                h: h.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Result<Self, GeometryError> {
        let two = T::lit(2.0);
        Self::new(cx - w / two, cy - h / two, w, h)
    }

    #[inline]
    pub fn x(&self) -> T {
        self.x
    }
    #[inline]
    pub fn y(&self) -> T {
        self.y
    }
    #[inline]
    pub fn w(&self) -> T {
        self.w
    }
    #[inline]
    pub fn h(&self) -> T {
        self.h
    }
    #[inline]
    pub fn right(&self) -> T {
        self.x + self.w
    }
    #[inline]
    pub fn bottom(&self) -> T {
        self.y + self.h
    }

    pub fn center(&self) -> (T, T) {
        let two = T::lit(2.0);
        (self.x + self.w / two, self.y + self.h / two)
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= T::zero() || ih <= T::zero() {
            T::zero()
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &Self) -> T {
        iou(self, other)
    }

    /// Translates the box by `(dx, dy)`; size is unchanged, so the center
    /// moves by exactly the same vector.
    pub fn shift(&self, dx: T, dy: T) -> Self {
        shift(self, dx, dy)
    }

    /// Converts the coordinates into another scalar type.
    pub fn cast<U: Real>(&self) -> BBox<U> {
        BBox {
            x: U::lit(self.x.as_f64()),
            y: U::lit(self.y.as_f64()),
            w: U::lit(self.w.as_f64()),
            h: U::lit(self.h.as_f64()),
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    if a == b {
        return T::one();
    }
    let inter = a.intersection_area(b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one())
}

pub fn area<T: Real>(b: &BBox<T>) -> T {
    b.area()
}

pub fn shift<T: Real>(b: &BBox<T>, dx: T, dy: T) -> BBox<T> {
    BBox {
        x: b.x + dx,
        y: b.y + dy,
        w: b.w,
        h: b.h,
    }
}

/// Outcome of greedy non-maximal suppression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NmsResult {
    /// Kept indices in the order they were accepted (descending score).
    pub kept: Vec<usize>,
    /// For every input index, the kept index that suppressed it, if any.
    pub suppressed_by: Vec<Option<usize>>,
}

impl NmsResult {
    pub fn is_kept(&self, i: usize) -> bool {
        self.suppressed_by[i].is_none()
    }
}

/// Greedy descending-score NMS. A candidate is dropped when its IoU with an
/// already kept box is strictly greater than `threshold`. Equal scores are
/// visited in ascending index order.
pub fn nms<T: Real>(boxes: &[BBox<T>], scores: &[T], threshold: T) -> Result<NmsResult, GeometryError> {
    if boxes.len() != scores.len() {
        return Err(GeometryError::LengthMismatch {
            boxes: boxes.len(),
            scores: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut kept = Vec::new();
    let mut suppressed_by = vec![None; boxes.len()];
    for &i in &order {
        match kept.iter().find(|&&k: &&usize| iou(&boxes[k], &boxes[i]) > threshold) {
            Some(&k) => suppressed_by[i] = Some(k),
            None => kept.push(i),
        }
    }
    Ok(NmsResult { kept, suppressed_by })
}
