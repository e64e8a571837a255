//! Interval geometry on the real line.

use crate::error::{Error, Result};

/// Intersection-over-union of two intervals. Degenerate or disjoint pairs
/// yield 0.
pub fn iou_1d(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - |enclosure \ union| / |enclosure|`, in (-1, 1].
pub fn giou_1d(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for seg in [a, b] {
        if seg.0 >= seg.1 {
            return Err(Error::DegenerateSegment {
                start: seg.0,
                end: seg.1,
            });
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    let enclosure = a.1.max(b.1) - a.0.min(b.0);
    Ok(inter / union - (enclosure - union) / enclosure)
}
