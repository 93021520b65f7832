//! Axis-aligned boxes, overlap measures and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box has non-positive extent (w = {w}, h = {h})")]
    Degenerate { w: f64, h: f64 },
    #[error("box has non-finite coordinates")]
    NonFinite,
    #[error("score {0} outside [0, 1]")]
    Score(f64),
    #[error("image diagonal must be positive, got {0}")]
    Diagonal(f64),
}

/// Axis-aligned box in pixel coordinates (top-left corner plus extent) with a confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
    pub score: T,
}

impl<T: Scalar> BBox<T> {
    /// Builds a validated box: `w > 0`, `h > 0`, finite coordinates and `score` in `[0, 1]`.
    pub fn new(x: T, y: T, w: T, h: T, score: T) -> Result<Self, GeometryError> {
        let b = Self { x, y, w, h, score };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if !(self.w > T::zero() && self.h > T::zero()) {
            return Err(GeometryError::Degenerate { w: self.w.as_f64(), h: self.h.as_f64() });
        }
        if !(self.score >= T::zero() && self.score <= T::one()) {
            return Err(GeometryError::Score(self.score.as_f64()));
        }
        Ok(())
    }

    /// Box from center, aspect ratio (w / h) and height.
    pub fn from_xyah(cx: T, cy: T, aspect: T, h: T, score: T) -> Self {
        let w = aspect * h;
        let two = T::lit(2.0);
        Self { x: cx - w / two, y: cy - h / two, w, h, score }
    }

    /// `(center-x, center-y, aspect, height)`.
    pub fn to_xyah(&self) -> [T; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.w / self.h, self.h]
    }

    #[inline]
    pub fn right(&self) -> T {
        self.x + self.w
    }

    #[inline]
    pub fn bottom(&self) -> T {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> T {
        self.w * self.h
    }

    #[inline]
    pub fn center(&self) -> (T, T) {
        let two = T::lit(2.0);
        (self.x + self.w / two, self.y + self.h / two)
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

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &Self) -> T {
        let inter = self.intersection_area(other);
        if inter <= T::zero() {
            return T::zero();
        }
        // Areas from the same edge arithmetic as the intersection, so iou(a, a) == 1 exactly.
        let edge_area = |b: &Self| (b.right() - b.x) * (b.bottom() - b.y);
        let union = edge_area(self) + edge_area(other) - inter;
        (inter / union).min(T::one())
    }

    /// True when `inner` lies entirely inside `self` (edges may touch).
    pub fn contains(&self, inner: &Self) -> bool {
        inner.x >= self.x && inner.y >= self.y && inner.right() <= self.right() && inner.bottom() <= self.bottom()
    }

    pub fn translated(&self, dx: T, dy: T) -> Self {
        Self { x: self.x + dx, y: self.y + dy, ..*self }
    }

    pub fn with_score(&self, score: T) -> Self {
        Self { score, ..*self }
    }
}

/// Free-function form of [`BBox::iou`].
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    a.iou(b)
}

/// Euclidean distance between box centers divided by the image diagonal.
pub fn center_distance<T: Scalar>(a: &BBox<T>, b: &BBox<T>, image_diagonal: T) -> Result<T, GeometryError> {
    if !(image_diagonal > T::zero()) || !image_diagonal.is_finite() {
        return Err(GeometryError::Diagonal(image_diagonal.as_f64()));
    }
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    Ok((ax - bx).hypot(ay - by) / image_diagonal)
}

/// Indices of the boxes kept by greedy NMS, in descending score order.
///
/// A box is suppressed when its IoU with an already kept box is strictly greater than
/// `iou_threshold`. Equal scores keep the smaller index first.
pub fn nms_indices<T: Scalar>(boxes: &[BBox<T>], iou_threshold: T) -> Vec<usize> {
    debug_assert!(iou_threshold >= T::zero() && iou_threshold <= T::one());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .score
            .partial_cmp(&boxes[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[idx]) <= iou_threshold) {
            kept.push(idx);
        }
    }
    kept
}

pub fn nms<T: Scalar>(boxes: &[BBox<T>], iou_threshold: T) -> Vec<BBox<T>> {
    nms_indices(boxes, iou_threshold).into_iter().map(|i| boxes[i]).collect()
}
