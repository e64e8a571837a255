//! Inference post-processing: score fusion, top-k, Soft-NMS, window merging.

use crate::config::SoftNmsMode;
use crate::localizer::argmax_lowest;
use crate::segments::iou_1d;

/// Raw per-query inference snapshot, coordinates normalized to the sample.
#[derive(Clone, Debug)]
pub struct InferenceProposal {
    pub start: f64,
    pub end: f64,
    /// Eq.-6 logits over the active (test-time) class list.
    pub logits: Vec<f64>,
    pub actionness: f64,
}

/// A scored, labeled segment; coordinates inherit the input domain.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedDetection {
    pub start: f64,
    pub end: f64,
    pub class_index: usize,
    pub score: f64,
}

/// Final detection in absolute seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub class_name: String,
    pub score: f64,
}

fn rank_key(d: &RankedDetection) -> (std::cmp::Reverse<u64>, u64, u64) {
    // Total order: score desc, start asc, end asc. Scores/coords are finite.
    (
        std::cmp::Reverse(ordered_bits(d.score)),
        ordered_bits(d.start),
        ordered_bits(d.end),
    )
}

/// Monotone map from finite f64 to u64 preserving order.
fn ordered_bits(v: f64) -> u64 {
    let bits = v.to_bits();
    if v >= 0.0 {
        bits ^ (1 << 63)
    } else {
        !bits
    }
}

/// Confidence fusion and top-k selection: `score = max-class probability *
/// actionness`, label by argmax with ties to the lowest index, descending
/// order, first `k` kept (all, when fewer).
pub fn fuse_and_topk(
    proposals: &[InferenceProposal],
    k: usize,
    temperature: f64,
) -> Vec<RankedDetection> {
    let mut ranked: Vec<RankedDetection> = proposals
        .iter()
        .map(|p| {
            let class_index = argmax_lowest(&p.logits);
            let max = p
                .logits
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = p.logits.iter().map(|v| ((v - max) / temperature).exp()).sum();
            let prob = ((p.logits[class_index] - max) / temperature).exp() / denom;
            RankedDetection {
                start: p.start,
                end: p.end,
                class_index,
                score: prob * p.actionness,
            }
        })
        .collect();
    ranked.sort_by_key(rank_key);
    ranked.truncate(k);
    ranked
}

/// Soft-NMS over one `(video, class)` group.
///
/// Iteratively keeps the highest-scoring detection and decays the rest:
/// linear mode rescales by `1 - IoU` above the IoU threshold, Gaussian mode
/// by `exp(-IoU^2 / sigma)` unconditionally. Detections falling below
/// `min_score` are dropped. Scores never increase and the top detection is
/// untouched.
pub fn soft_nms(
    detections: Vec<RankedDetection>,
    mode: SoftNmsMode,
    iou_threshold: f64,
    sigma: f64,
    min_score: f64,
) -> Vec<RankedDetection> {
    let mut pool = detections;
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = pool
            .iter()
            .enumerate()
            .min_by_key(|(_, d)| rank_key(d))
            .map(|(i, _)| i)
            .expect("non-empty pool");
        let current = pool.remove(best);
        for d in &mut pool {
            let overlap = iou_1d((current.start, current.end), (d.start, d.end));
            match mode {
                SoftNmsMode::Linear => {
                    if overlap > iou_threshold {
                        d.score *= 1.0 - overlap;
                    }
                }
                SoftNmsMode::Gaussian => {
                    d.score *= (-overlap * overlap / sigma).exp();
                }
            }
        }
        pool.retain(|d| d.score >= min_score);
        kept.push(current);
    }
    kept
}

/// Detections from one preprocessing window, still window-normalized.
#[derive(Clone, Debug)]
pub struct WindowDetections {
    /// Snippet offset of the window in the source video.
    pub offset: usize,
    pub window_len: usize,
    /// Valid (non padded) snippet count.
    pub valid: usize,
    pub detections: Vec<RankedDetection>,
}

pub struct MergeOutcome {
    pub detections: Vec<RankedDetection>,
    /// Detections that had to be clipped back into their window's extent.
    pub clipped: usize,
}

/// Maps window-normalized detections to absolute seconds and concatenates
/// them. Coordinates beyond a window's valid extent are clipped (counted in
/// the outcome so callers can warn). Soft-NMS runs afterwards, globally per
/// video and class.
pub fn merge_windows(windows: &[WindowDetections], snippet_seconds: f64) -> MergeOutcome {
    let mut merged = Vec::new();
    let mut clipped = 0;
    for window in windows {
        let extent = window.valid as f64 * snippet_seconds;
        for d in &window.detections {
            let mut start =
                (window.offset as f64 + d.start * window.window_len as f64) * snippet_seconds;
            let mut end =
                (window.offset as f64 + d.end * window.window_len as f64) * snippet_seconds;
            let window_start = window.offset as f64 * snippet_seconds;
            let window_end = window_start + extent;
            if start < window_start || end > window_end {
                start = start.max(window_start);
                end = end.min(window_end);
                clipped += 1;
            }
            if end > start {
                merged.push(RankedDetection {
                    start,
                    end,
                    class_index: d.class_index,
                    score: d.score,
                });
            }
        }
    }
    MergeOutcome {
        detections: merged,
        clipped,
    }
}
