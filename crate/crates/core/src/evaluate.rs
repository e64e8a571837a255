//! Zero-shot evaluation: class splits and mean average precision.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::postprocess::Detection;
use crate::rng::Rng;
use crate::segments::iou_1d;

/// Disjoint seen/unseen partition of the class list.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotSplit {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub split_id: usize,
    pub seed: u64,
}

/// Uniform random class partitions, deterministic per `(seed, split_id)`.
/// The seen side holds `round(seen_fraction * C)` classes.
pub fn make_zero_shot_splits(
    classes: &[String],
    seen_fraction: f64,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<ZeroShotSplit>> {
    if n_splits == 0 {
        return Err(Error::config("n_splits", "must be positive"));
    }
    let total = classes.len();
    let seen_count = (seen_fraction * total as f64).round() as usize;
    if seen_count == 0 || seen_count >= total {
        return Err(Error::config(
            "seen_fraction",
            format!("split {seen_count}/{} leaves one side empty", total - seen_count),
        ));
    }
    let root = Rng::new(seed);
    Ok((0..n_splits)
        .map(|split_id| {
            let mut rng = root.derive(&format!("split/{split_id}"));
            let mut order: Vec<usize> = (0..total).collect();
            rng.shuffle(&mut order);
            let mut seen_idx: Vec<usize> = order[..seen_count].to_vec();
            let mut unseen_idx: Vec<usize> = order[seen_count..].to_vec();
            seen_idx.sort_unstable();
            unseen_idx.sort_unstable();
            ZeroShotSplit {
                seen: seen_idx.iter().map(|&i| classes[i].clone()).collect(),
                unseen: unseen_idx.iter().map(|&i| classes[i].clone()).collect(),
                split_id,
                seed,
            }
        })
        .collect())
}

/// One annotated segment for scoring.
#[derive(Clone, Debug)]
pub struct GtEntry {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub class_name: String,
}

/// Per-threshold mAP plus their average.
#[derive(Clone, Debug, PartialEq)]
pub struct ApTable {
    /// (iou_threshold, mAP) rows in input threshold order.
    pub rows: Vec<(f64, f64)>,
    pub average: f64,
    /// Classes that had detections but no ground truth and were skipped.
    pub skipped_classes: Vec<String>,
}

fn ordered_bits(v: f64) -> u64 {
    let bits = v.to_bits();
    if v >= 0.0 {
        bits ^ (1 << 63)
    } else {
        !bits
    }
}

/// Average precision by 101-point interpolation of the precision envelope.
/// `points` are cumulative (precision, recall) pairs in detection-rank
/// order; `total_gt` must be positive.
pub fn interpolated_ap_101(points: &[(f64, f64)], total_gt: usize) -> f64 {
    debug_assert!(total_gt > 0);
    let mut ap = 0.0;
    for grid in 0..=100 {
        let r = grid as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(_, recall)| *recall >= r - 1e-12)
            .map(|(precision, _)| *precision)
            .fold(0.0, f64::max);
        ap += best;
    }
    ap / 101.0
}

/// Greedy one-to-one matching for one class at one IoU threshold, yielding
/// cumulative (precision, recall) points in detection-rank order.
fn class_pr_points(
    detections: &[&Detection],
    gts_by_video: &BTreeMap<&str, Vec<(f64, f64)>>,
    total_gt: usize,
    threshold: f64,
) -> Vec<(f64, f64)> {
    let mut matched: BTreeMap<&str, Vec<bool>> = gts_by_video
        .iter()
        .map(|(video, gts)| (*video, vec![false; gts.len()]))
        .collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(detections.len());
    for det in detections {
        let mut best: Option<(usize, f64)> = None;
        if let Some(gts) = gts_by_video.get(det.video_id.as_str()) {
            let flags = &matched[det.video_id.as_str()];
            for (i, gt) in gts.iter().enumerate() {
                if flags[i] {
                    continue;
                }
                let overlap = iou_1d((det.start, det.end), *gt);
                if overlap >= threshold && best.map_or(true, |(_, b)| overlap > b) {
                    best = Some((i, overlap));
                }
            }
        }
        match best {
            Some((i, _)) => {
                matched.get_mut(det.video_id.as_str()).unwrap()[i] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        points.push((
            tp as f64 / (tp + fp) as f64,
            tp as f64 / total_gt as f64,
        ));
    }
    points
}

fn class_ap(
    detections: &[&Detection],
    gts_by_video: &BTreeMap<&str, Vec<(f64, f64)>>,
    total_gt: usize,
    threshold: f64,
) -> f64 {
    interpolated_ap_101(
        &class_pr_points(detections, gts_by_video, total_gt, threshold),
        total_gt,
    )
}

/// Per-class cumulative PR points at one threshold (for plotting).
pub fn pr_curves(
    detections: &[Detection],
    ground_truth: &[GtEntry],
    threshold: f64,
) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut per_class_gts: BTreeMap<&str, BTreeMap<&str, Vec<(f64, f64)>>> = BTreeMap::new();
    for gt in ground_truth {
        per_class_gts
            .entry(gt.class_name.as_str())
            .or_default()
            .entry(gt.video_id.as_str())
            .or_default()
            .push((gt.start, gt.end));
    }
    let mut per_class_dets: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for det in detections {
        per_class_dets
            .entry(det.class_name.as_str())
            .or_default()
            .push(det);
    }
    for dets in per_class_dets.values_mut() {
        dets.sort_by_key(|d| {
            (
                std::cmp::Reverse(ordered_bits(d.score)),
                ordered_bits(d.start),
                ordered_bits(d.end),
                d.video_id.clone(),
            )
        });
    }
    let empty: Vec<&Detection> = Vec::new();
    per_class_gts
        .iter()
        .map(|(class, gts)| {
            let total: usize = gts.values().map(Vec::len).sum();
            let dets = per_class_dets.get(class).unwrap_or(&empty);
            (
                class.to_string(),
                class_pr_points(dets, gts, total, threshold),
            )
        })
        .collect()
}

/// mAP over classes at each IoU threshold plus the threshold average.
///
/// Detections are ranked by (score desc, start asc, end asc, video id);
/// each detection may claim at most one unmatched ground truth of its class
/// in its own video (the highest-IoU candidate at or above the threshold).
/// Classes without any ground truth are skipped and reported, not averaged.
pub fn evaluate_map(
    detections: &[Detection],
    ground_truth: &[GtEntry],
    thresholds: &[f64],
) -> Result<ApTable> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0 < *t && *t <= 1.0)) {
        return Err(Error::config(
            "iou_thresholds",
            "must be non-empty with values in (0, 1]",
        ));
    }
    let mut classes: Vec<&str> = ground_truth
        .iter()
        .map(|g| g.class_name.as_str())
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut skipped: Vec<String> = detections
        .iter()
        .map(|d| d.class_name.clone())
        .filter(|c| !classes.iter().any(|k| k == c))
        .collect();
    skipped.sort();
    skipped.dedup();

    // Rank detections once per class.
    let mut per_class_dets: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for det in detections {
        per_class_dets
            .entry(det.class_name.as_str())
            .or_default()
            .push(det);
    }
    for dets in per_class_dets.values_mut() {
        dets.sort_by_key(|d| {
            (
                std::cmp::Reverse(ordered_bits(d.score)),
                ordered_bits(d.start),
                ordered_bits(d.end),
                d.video_id.clone(),
            )
        });
    }
    let mut per_class_gts: BTreeMap<&str, BTreeMap<&str, Vec<(f64, f64)>>> = BTreeMap::new();
    for gt in ground_truth {
        per_class_gts
            .entry(gt.class_name.as_str())
            .or_default()
            .entry(gt.video_id.as_str())
            .or_default()
            .push((gt.start, gt.end));
    }

    let empty: Vec<&Detection> = Vec::new();
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut sum = 0.0;
        for class in &classes {
            let gts = &per_class_gts[class];
            let total_gt: usize = gts.values().map(Vec::len).sum();
            let dets = per_class_dets.get(class).unwrap_or(&empty);
            sum += class_ap(dets, gts, total_gt, threshold);
        }
        rows.push((threshold, sum / classes.len() as f64));
    }
    let average = rows.iter().map(|(_, m)| m).sum::<f64>() / rows.len() as f64;
    Ok(ApTable {
        rows,
        average,
        skipped_classes: skipped,
    })
}
