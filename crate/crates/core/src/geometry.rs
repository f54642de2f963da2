//! Axis-aligned boxes in normalized image coordinates.
//!
//! Every box is `(x, y, w, h)` with the origin at the top-left corner and all
//! four values expressed as fractions of the image width or height. A box is
//! *clamped* when it lies entirely inside the unit square.

use serde::{Deserialize, Serialize};

use crate::error::{LagoError, Result};

/// A normalized axis-aligned region of the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// The whole image.
    pub const FULL: BoundingBox = BoundingBox {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };

    /// Builds a box, rejecting non-positive or non-finite extents.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite();
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(LagoError::InvalidBox {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
            });
        }
        Ok(())
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Area computed from the edge coordinates so it agrees bit-for-bit with
    /// the intersection of a box with itself.
    pub fn area(&self) -> f64 {
        (self.right() - self.x) * (self.bottom() - self.y)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// True when the box lies inside the unit square, up to `tol`.
    pub fn is_clamped(&self, tol: f64) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.right() <= 1.0 + tol
            && self.bottom() <= 1.0 + tol
    }

    fn bits(&self) -> [u64; 4] {
        [
            self.x.to_bits(),
            self.y.to_bits(),
            self.w.to_bits(),
            self.h.to_bits(),
        ]
    }
}

/// Moves a box inside the image, shrinking an extent only when it exceeds 1.
///
/// Translation is preferred over shrinking, so any box that fits keeps its
/// shape.
pub fn clamp_to_image(b: BoundingBox) -> Result<BoundingBox> {
    b.validate()?;
    let w = b.w.min(1.0);
    let h = b.h.min(1.0);
    let x = b.x.min(1.0 - w).max(0.0);
    let y = b.y.min(1.0 - h).max(0.0);
    Ok(BoundingBox { x, y, w, h })
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let left = a.x.max(b.x);
    let top = a.y.max(b.y);
    let right = a.right().min(b.right());
    let bottom = a.bottom().min(b.bottom());
    if right <= left || bottom <= top {
        return 0.0;
    }
    let inter = (right - left) * (bottom - top);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// The 8-move neighborhood of `b`, each move clamped to the image.
///
/// Moves, in order: translate `+x`, `-x` by `delta * w`; translate `+y`, `-y`
/// by `delta * h`; scale width by `1 + rho`, `1 - rho`; scale height by
/// `1 + rho`, `1 - rho`. Scaling keeps the box center fixed. Moves that
/// clamp onto `b` itself or onto an earlier move are dropped.
pub fn generate_neighbors(b: &BoundingBox, delta: f64, rho: f64) -> Vec<BoundingBox> {
    let dx = delta * b.w;
    let dy = delta * b.h;
    let grow_w = b.w * (1.0 + rho);
    let shrink_w = b.w * (1.0 - rho);
    let grow_h = b.h * (1.0 + rho);
    let shrink_h = b.h * (1.0 - rho);
    let recenter = |old: f64, new: f64| 0.5 * (old - new);

    let raw = [
        BoundingBox { x: b.x + dx, ..*b },
        BoundingBox { x: b.x - dx, ..*b },
        BoundingBox { y: b.y + dy, ..*b },
        BoundingBox { y: b.y - dy, ..*b },
        BoundingBox { x: b.x + recenter(b.w, grow_w), w: grow_w, ..*b },
        BoundingBox { x: b.x + recenter(b.w, shrink_w), w: shrink_w, ..*b },
        BoundingBox { y: b.y + recenter(b.h, grow_h), h: grow_h, ..*b },
        BoundingBox { y: b.y + recenter(b.h, shrink_h), h: shrink_h, ..*b },
    ];

    let mut seen = vec![b.bits()];
    let mut out = Vec::with_capacity(raw.len());
    for candidate in raw {
        let Ok(clamped) = clamp_to_image(candidate) else {
            continue;
        };
        let key = clamped.bits();
        if !seen.contains(&key) {
            seen.push(key);
            out.push(clamped);
        }
    }
    out
}

/// Indices of a greedy IoU-diverse top-`k` selection over `boxes`.
///
/// Candidates are visited by descending score (stable on input order) and
/// kept only when their IoU with every kept box is below `iou_threshold`.
pub fn diverse_top_k_indices(
    boxes: &[BoundingBox],
    scores: &[f64],
    k: usize,
    iou_threshold: f64,
) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut kept: Vec<usize> = Vec::with_capacity(k.min(boxes.len()));
    for idx in order {
        if kept.len() >= k {
            break;
        }
        if kept
            .iter()
            .all(|&j| iou(&boxes[j], &boxes[idx]) < iou_threshold)
        {
            kept.push(idx);
        }
    }
    kept
}

/// Greedy IoU-diverse top-`k` over `(box, score)` pairs.
pub fn diverse_top_k(
    candidates: &[(BoundingBox, f64)],
    k: usize,
    iou_threshold: f64,
) -> Vec<(BoundingBox, f64)> {
    let boxes: Vec<BoundingBox> = candidates.iter().map(|c| c.0).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    diverse_top_k_indices(&boxes, &scores, k, iou_threshold)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}
