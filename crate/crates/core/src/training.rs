//! Bipartite matching and the three-term training loss.
//!
//! Ground-truth segments are matched one-to-one to query proposals by
//! minimum cost (classification probability plus box resemblance); matched
//! pairs receive the classification and boundary losses, every query
//! receives the actionness ranking loss. The cost matrix and the actionness
//! targets are plain values; the losses themselves are built on the tape so
//! gradients flow to every head.

use crate::autodiff::Var;
use crate::config::{FinetuneMode, MaskMode, ModelConfig, TrainingConfig};
use crate::concepts::ConceptTable;
use crate::encoders::{encode_frames, encode_text, semantic_representation, temporal_transform};
use crate::error::{Error, Result};
use crate::localizer::{classify_masked, localizer_forward, LocalizerForward};
use crate::matrix::Matrix;
use crate::params::Binder;
use crate::segments::{giou_1d, iou_1d};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub bbox: f64,
    pub actionness: f64,
    pub l1: f64,
    pub giou: f64,
    pub temperature: f64,
}

impl LossWeights {
    pub fn from_config(training: &TrainingConfig, model: &ModelConfig) -> Self {
        LossWeights {
            cls: training.lambda_cls,
            bbox: training.lambda_bbox,
            actionness: training.lambda_actionness,
            l1: training.alpha_l1,
            giou: training.alpha_giou,
            temperature: model.temperature,
        }
    }
}

/// One-to-one assignment: every ground-truth segment gets exactly one query.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    /// (query_index, gt_index) pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

/// Snapshot of one proposal for matching (no gradients).
#[derive(Clone, Debug)]
pub struct PlainProposal {
    pub start: f64,
    pub end: f64,
    /// Eq.-6 logits over the active training classes; may be empty when the
    /// classification term is disabled.
    pub logits: Vec<f64>,
    pub actionness: f64,
}

/// Ground truth in normalized coordinates plus active-class index.
#[derive(Clone, Copy, Debug)]
pub struct PlainTarget {
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Matching cost: `lambda_cls * (-p[class]) + lambda_bbox * (alpha_l1 * L1 +
/// alpha_giou * (1 - gIoU))`, probabilities (not log) per the DETR
/// convention, boxes in normalized (start, end) coordinates.
pub fn build_cost_matrix(
    proposals: &[PlainProposal],
    targets: &[PlainTarget],
    weights: &LossWeights,
) -> Result<Matrix> {
    if targets.is_empty() {
        return Err(Error::EmptyTargets("cost matrix".into()));
    }
    let mut cost = Matrix::zeros(proposals.len(), targets.len());
    for (i, proposal) in proposals.iter().enumerate() {
        let probs = if weights.cls != 0.0 {
            let scaled: Vec<f64> = proposal
                .logits
                .iter()
                .map(|v| v / weights.temperature)
                .collect();
            softmax(&scaled)
        } else {
            Vec::new()
        };
        for (k, target) in targets.iter().enumerate() {
            let mut value = 0.0;
            if weights.cls != 0.0 {
                value += weights.cls * -probs[target.class];
            }
            let l1 =
                (proposal.start - target.start).abs() + (proposal.end - target.end).abs();
            let giou = giou_1d(
                (proposal.start, proposal.end),
                (target.start, target.end),
            )?;
            value += weights.bbox * (weights.l1 * l1 + weights.giou * (1.0 - giou));
            cost.set(i, k, value);
        }
    }
    Ok(cost)
}

/// Optimal assignment of all `K` columns (targets) to distinct rows
/// (queries) of an `[N x K]` cost matrix, `N >= K`. Successive shortest
/// augmenting paths with potentials; exact for floating-point costs.
pub fn hungarian_match(cost: &Matrix) -> Result<MatchAssignment> {
    let n = cost.rows();
    let k = cost.cols();
    if n < k {
        return Err(Error::Infeasible {
            queries: n,
            targets: k,
        });
    }
    // 1-based algorithm over rows = targets, columns = queries.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; n + 1];
    let mut assigned_target = vec![0usize; n + 1]; // column j -> target row
    let mut way = vec![0usize; n + 1];
    for target in 1..=k {
        assigned_target[0] = target;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_target[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(j - 1, i0 - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_target[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_target[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_target[j0] = assigned_target[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| assigned_target[j] != 0)
        .map(|j| (j - 1, assigned_target[j] - 1))
        .collect();
    pairs.sort_by_key(|&(_, target)| target);
    let matched: std::collections::BTreeSet<usize> = pairs.iter().map(|&(q, _)| q).collect();
    let unmatched_queries = (0..n).filter(|q| !matched.contains(q)).collect();
    Ok(MatchAssignment {
        pairs,
        unmatched_queries,
    })
}

pub fn assignment_cost(cost: &Matrix, assignment: &MatchAssignment) -> f64 {
    assignment
        .pairs
        .iter()
        .map(|&(q, t)| cost.get(q, t))
        .sum()
}

// ---------------------------------------------------------------------------
// Tape losses
// ---------------------------------------------------------------------------

/// Row-selection constant: `[pairs x n]` matrix picking matched rows.
fn selection<'t>(binder: &Binder<'t, '_>, rows: &[usize], n: usize) -> Var<'t> {
    let m = Matrix::from_fn(rows.len(), n, |i, j| if rows[i] == j { 1.0 } else { 0.0 });
    binder.constant(m)
}

/// Mean `-log softmax(logits/tau)[gt class]` over matched pairs.
pub fn classification_loss<'t>(
    binder: &Binder<'t, '_>,
    logits: Var<'t>,
    pairs: &[(usize, usize)],
    target_classes: &[usize],
    temperature: f64,
) -> Result<Var<'t>> {
    if pairs.is_empty() {
        return Err(Error::EmptyTargets("classification_loss".into()));
    }
    let n = logits.rows();
    let c = logits.cols();
    let rows: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
    let matched = selection(binder, &rows, n).matmul(logits);
    let log_probs = matched.scale(1.0 / temperature).log_softmax_rows();
    let one_hot = Matrix::from_fn(pairs.len(), c, |i, j| {
        if target_classes[pairs[i].1] == j {
            1.0
        } else {
            0.0
        }
    });
    Ok(log_probs
        .mul(binder.constant(one_hot))
        .sum_all()
        .scale(-1.0 / pairs.len() as f64))
}

/// Elementwise 1D gIoU over `[P x 1]` endpoint vectors.
pub fn giou_vars<'t>(s_a: Var<'t>, e_a: Var<'t>, s_b: Var<'t>, e_b: Var<'t>) -> Var<'t> {
    let inter = e_a.vmin(e_b).sub(s_a.vmax(s_b)).relu();
    let union = e_a.sub(s_a).add(e_b.sub(s_b)).sub(inter);
    let enclose = e_a.vmax(e_b).sub(s_a.vmin(s_b));
    inter.div(union).sub(enclose.sub(union).div(enclose))
}

/// Boundary regression losses over matched pairs: mean L1 on (start, end)
/// and mean `1 - gIoU` (both to be minimized).
pub fn bbox_loss<'t>(
    binder: &Binder<'t, '_>,
    starts: Var<'t>,
    ends: Var<'t>,
    pairs: &[(usize, usize)],
    targets: &[PlainTarget],
) -> Result<(Var<'t>, Var<'t>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyTargets("bbox_loss".into()));
    }
    let n = starts.rows();
    let rows: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
    let sel = selection(binder, &rows, n);
    let s = sel.matmul(starts);
    let e = sel.matmul(ends);
    let gt_s = binder.constant(Matrix::from_fn(pairs.len(), 1, |i, _| targets[pairs[i].1].start));
    let gt_e = binder.constant(Matrix::from_fn(pairs.len(), 1, |i, _| targets[pairs[i].1].end));
    let l1 = s.sub(gt_s).abs().add(e.sub(gt_e).abs()).mean_all();
    let giou = giou_vars(s, e, gt_s, gt_e);
    let giou_term = giou.neg().add_scalar(1.0).mean_all();
    Ok((l1, giou_term))
}

/// Mean `|a_i - max_k IoU(b_i, b_k)|` over all queries; the IoU target is a
/// constant (detached).
pub fn actionness_loss<'t>(
    binder: &Binder<'t, '_>,
    actionness: Var<'t>,
    proposals: &[PlainProposal],
    targets: &[PlainTarget],
) -> Result<Var<'t>> {
    if targets.is_empty() {
        return Err(Error::EmptyTargets("actionness_loss".into()));
    }
    let target_col = Matrix::from_fn(proposals.len(), 1, |i, _| {
        targets
            .iter()
            .map(|t| iou_1d((proposals[i].start, proposals[i].end), (t.start, t.end)))
            .fold(0.0, f64::max)
    });
    Ok(actionness.sub(binder.constant(target_col)).abs().mean_all())
}

// ---------------------------------------------------------------------------
// Per-video loss graph
// ---------------------------------------------------------------------------

/// One preprocessed training sample (a resized video or one window).
#[derive(Clone, Debug)]
pub struct VideoSample {
    /// `[T x l]` snippet features.
    pub features: Matrix,
    /// `[T x k]` frame latents.
    pub latents: Matrix,
    /// Targets in sample-normalized coordinates with active-class indices.
    pub targets: Vec<PlainTarget>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub cls: f64,
    pub bbox_l1: f64,
    pub bbox_giou: f64,
    pub actionness: f64,
    pub total: f64,
}

/// Which slice of the network trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPhase {
    /// Full pipeline, classification through the segment-generator mask.
    OneStage,
    /// Class-agnostic localization only (boundary + actionness terms).
    LocalizerOnly,
    /// Classification branch only, supervised on ground-truth spans.
    ClassifierOnly,
}

/// Binary snippet mask for a normalized span (round-to-nearest indices).
pub fn hard_mask(t: usize, start: f64, end: f64) -> Matrix {
    let lo = (start * t as f64).round().clamp(0.0, t as f64) as usize;
    let hi = (end * t as f64).round().clamp(0.0, t as f64) as usize;
    Matrix::from_fn(t, 1, |i, _| if i >= lo && i < hi { 1.0 } else { 0.0 })
}

/// Snapshot of one decoder layer's heads as plain proposals.
fn snapshot_layer(
    layer: &crate::localizer::LayerHeads<'_>,
    logits: Option<&Matrix>,
) -> Vec<PlainProposal> {
    let starts = layer.starts.value();
    let ends = layer.ends.value();
    let act = layer.actionness.value();
    (0..starts.rows())
        .map(|q| PlainProposal {
            start: starts.get(q, 0),
            end: ends.get(q, 0),
            logits: logits.map(|m| m.row(q).to_vec()).unwrap_or_default(),
            actionness: act.get(q, 0),
        })
        .collect()
}

/// Builds the full one-stage (or localizer-only) loss for one sample.
/// Auxiliary losses run on every decoder layer and are averaged.
pub fn video_loss<'t>(
    binder: &Binder<'t, '_>,
    model: &ModelConfig,
    concepts: &ConceptTable,
    seen_classes: &[String],
    mode: FinetuneMode,
    phase: TrainPhase,
    sample: &VideoSample,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossParts)> {
    if sample.targets.is_empty() {
        return Err(Error::EmptyTargets("video without annotations".into()));
    }
    if phase == TrainPhase::ClassifierOnly {
        return classifier_only_loss(binder, model, concepts, seen_classes, mode, sample, weights);
    }
    let use_cls = phase == TrainPhase::OneStage;
    let semantic = if use_cls {
        let frames = encode_frames(binder, &sample.latents)?;
        let ctx = temporal_transform(binder, model, frames)?;
        let text = encode_text(binder, model, concepts, seen_classes, mode)?;
        Some(semantic_representation(ctx, text)?)
    } else {
        None
    };
    let forward: LocalizerForward<'t> = localizer_forward(binder, model, &sample.features)?;
    let t = sample.features.rows();
    let layer_weights = LossWeights {
        cls: if use_cls { weights.cls } else { 0.0 },
        ..*weights
    };

    let mut total: Option<Var<'t>> = None;
    let mut parts = LossParts::default();
    let n_layers = forward.layers.len() as f64;
    for layer in &forward.layers {
        let logits_var = match (&semantic, model.mask_mode) {
            (Some(s), MaskMode::Soft) => Some(classify_masked(layer.masks, *s)?),
            (Some(s), MaskMode::HardBoundary) => {
                let starts = layer.starts.value();
                let ends = layer.ends.value();
                let cols: Vec<Matrix> = (0..starts.rows())
                    .map(|q| hard_mask(t, starts.get(q, 0), ends.get(q, 0)))
                    .collect();
                let mut mask = Matrix::zeros(t, starts.rows());
                for (q, col) in cols.iter().enumerate() {
                    for row in 0..t {
                        mask.set(row, q, col.get(row, 0));
                    }
                }
                Some(classify_masked(binder.constant(mask), *s)?)
            }
            (None, _) => None,
        };
        let logits_snapshot = logits_var.map(|v| (*v.value()).clone());
        let proposals = snapshot_layer(layer, logits_snapshot.as_ref());
        let cost = build_cost_matrix(&proposals, &sample.targets, &layer_weights)?;
        let assignment = hungarian_match(&cost)?;

        let (l1, giou_term) = bbox_loss(
            binder,
            layer.starts,
            layer.ends,
            &assignment.pairs,
            &sample.targets,
        )?;
        let act = actionness_loss(binder, layer.actionness, &proposals, &sample.targets)?;
        let target_classes: Vec<usize> = sample.targets.iter().map(|t| t.class).collect();
        let mut layer_total = l1
            .scale(weights.bbox * weights.l1)
            .add(giou_term.scale(weights.bbox * weights.giou))
            .add(act.scale(weights.actionness));
        if let Some(logits) = logits_var {
            let cls = classification_loss(
                binder,
                logits,
                &assignment.pairs,
                &target_classes,
                weights.temperature,
            )?;
            layer_total = layer_total.add(cls.scale(weights.cls));
            parts.cls += cls.scalar_value() / n_layers;
        }
        parts.bbox_l1 += l1.scalar_value() / n_layers;
        parts.bbox_giou += giou_term.scalar_value() / n_layers;
        parts.actionness += act.scalar_value() / n_layers;
        total = Some(match total {
            Some(sum) => sum.add(layer_total),
            None => layer_total,
        });
    }
    let total = total.expect("decoder has layers").scale(1.0 / n_layers);
    parts.total = total.scalar_value();
    Ok((total, parts))
}

/// Two-stage classifier training: cross-entropy of ground-truth spans under
/// hard masks; touches only the classification branch.
fn classifier_only_loss<'t>(
    binder: &Binder<'t, '_>,
    model: &ModelConfig,
    concepts: &ConceptTable,
    seen_classes: &[String],
    mode: FinetuneMode,
    sample: &VideoSample,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossParts)> {
    let frames = encode_frames(binder, &sample.latents)?;
    let ctx = temporal_transform(binder, model, frames)?;
    let text = encode_text(binder, model, concepts, seen_classes, mode)?;
    let semantic = semantic_representation(ctx, text)?;
    let t = sample.latents.rows();
    let mut mask = Matrix::zeros(t, sample.targets.len());
    for (i, target) in sample.targets.iter().enumerate() {
        let col = hard_mask(t, target.start, target.end);
        for row in 0..t {
            mask.set(row, i, col.get(row, 0));
        }
    }
    let logits = classify_masked(binder.constant(mask), semantic)?;
    let pairs: Vec<(usize, usize)> = (0..sample.targets.len()).map(|i| (i, i)).collect();
    let target_classes: Vec<usize> = sample.targets.iter().map(|t| t.class).collect();
    let cls = classification_loss(binder, logits, &pairs, &target_classes, weights.temperature)?;
    let total = cls.scale(weights.cls);
    let parts = LossParts {
        cls: cls.scalar_value(),
        total: total.scalar_value(),
        ..LossParts::default()
    };
    Ok((total, parts))
}
