//! Experiment orchestration: dataset bundles on disk, model assembly,
//! the training loop, inference and the split-averaged evaluation protocol.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{inject_adapters, tpt_prepend};
use crate::autodiff::Tape;
use crate::checkpoint::{load_archive, save_archive};
use crate::concepts::ConceptTable;
use crate::config::{
    ExperimentConfig, FinetuneMode, MaskMode, PreprocessMode, StructureMode,
};
use crate::encoders::{
    build_frozen_clip, build_temporal_params, encode_frames, encode_text,
    semantic_representation, temporal_transform,
};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_map, ApTable, GtEntry, ZeroShotSplit};
use crate::localizer::{build_localizer_params, classify_masked, localizer_forward};
use crate::matrix::Matrix;
use crate::optim::Adam;
use crate::params::{Binder, ParamSet};
use crate::postprocess::{
    fuse_and_topk, merge_windows, soft_nms, Detection, InferenceProposal, RankedDetection,
    WindowDetections,
};
use crate::rng::Rng;
use crate::synthetic::{
    annotation_index, generate_dataset, read_annotations, read_class_list, read_feature_file,
    regenerate_latents, resize_features, slice_windows, write_annotations, write_class_list,
    write_feature_file, ClassProfile, Dataset, GroundTruthSegment, SyntheticVideo,
};
use crate::training::{
    hard_mask, video_loss, LossParts, LossWeights, PlainTarget, TrainPhase, VideoSample,
};

pub const ENCODERS_FILE: &str = "encoders.bin";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const CLASSES_FILE: &str = "classes.txt";

// ---------------------------------------------------------------------------
// Dataset bundle
// ---------------------------------------------------------------------------

/// A synthesized dataset plus the frozen stand-in encoder weights that every
/// run over this dataset must share.
pub struct DatasetBundle {
    pub dataset: Dataset,
    /// Frozen mock text/visual encoder parameters (names under `clip.`).
    pub frozen_clip: ParamSet,
    pub config: ExperimentConfig,
}

pub fn synthesize(config: &ExperimentConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let dataset = generate_dataset(&config.dataset)?;
    let frozen_clip = build_frozen_clip(&config.dataset, &config.model, &dataset.concepts)?;
    Ok(DatasetBundle {
        dataset,
        frozen_clip,
        config: config.clone(),
    })
}

/// Writes the bundle: annotation JSON, class list, one feature binary per
/// video, and the encoder archive (which embeds the resolved config, the
/// concept table and the generator's frozen maps).
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::Refusal(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_annotations(
        &dir.join(ANNOTATIONS_FILE),
        &annotation_index(&bundle.dataset.videos),
    )?;
    write_class_list(&dir.join(CLASSES_FILE), &bundle.dataset.class_names)?;
    let mut archive_params = bundle.frozen_clip.clone();
    archive_params.insert(
        "concepts.latents",
        bundle.dataset.concepts.latents_matrix(),
        false,
    );
    archive_params.insert("gen.snippet_map", bundle.dataset.snippet_map.clone(), false);
    for (name, profile) in bundle
        .dataset
        .class_names
        .iter()
        .zip(&bundle.dataset.profiles)
    {
        let m = Matrix::from_fn(
            profile.sub_latents.len(),
            bundle.dataset.config.latent_dim,
            |i, j| profile.sub_latents[i][j],
        );
        archive_params.insert(format!("gen.sub.{name}"), m, false);
    }
    let config_json =
        serde_json::to_string(&bundle.config).map_err(|e| Error::Serde(e.to_string()))?;
    save_archive(&dir.join(ENCODERS_FILE), &config_json, &archive_params)?;
    for video in &bundle.dataset.videos {
        write_feature_file(
            &dir.join(format!("{}.bin", video.video_id)),
            &video.snippet_features,
        )?;
    }
    Ok(())
}

/// Loads a bundle, regenerating frame latents deterministically from the
/// persisted seed, class profiles and annotations.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let archive = load_archive(&dir.join(ENCODERS_FILE))?;
    let config: ExperimentConfig =
        serde_json::from_str(&archive.config_json).map_err(|e| Error::Serde(e.to_string()))?;
    let class_names = read_class_list(&dir.join(CLASSES_FILE))?;
    let annotations = read_annotations(&dir.join(ANNOTATIONS_FILE))?;

    let latents = &archive.params.value("concepts.latents").clone();
    let concepts = ConceptTable::from_latents(&class_names, latents)?;
    let snippet_map = archive.params.value("gen.snippet_map").clone();
    let profiles: Vec<ClassProfile> = class_names
        .iter()
        .map(|name| {
            let m = archive.params.value(&format!("gen.sub.{name}"));
            ClassProfile {
                sub_latents: (0..m.rows()).map(|i| m.row(i).to_vec()).collect(),
            }
        })
        .collect();

    let mut frozen_clip = ParamSet::new();
    for (name, param) in archive.params.iter() {
        if name.starts_with("clip.") {
            frozen_clip.insert(name.clone(), param.value.clone(), param.trainable);
        }
    }

    let mut videos = Vec::with_capacity(annotations.len());
    for (video_id, record) in &annotations {
        let features = read_feature_file(&dir.join(format!("{video_id}.bin")))?;
        let t = features.rows();
        let gts: Vec<GroundTruthSegment> = record
            .annotations
            .iter()
            .map(|a| GroundTruthSegment {
                start: a.segment[0],
                end: a.segment[1],
                class_name: a.label.clone(),
            })
            .collect();
        if gts.is_empty() {
            return Err(Error::Format(format!("{video_id}: no annotations")));
        }
        let class_idx = class_names
            .iter()
            .position(|n| *n == gts[0].class_name)
            .ok_or_else(|| Error::UnknownClass(gts[0].class_name.clone()))?;
        let frame_latents = regenerate_latents(
            &config.dataset,
            &profiles[class_idx],
            video_id,
            t,
            record.duration,
            &gts,
        );
        videos.push(SyntheticVideo {
            video_id: video_id.clone(),
            duration: record.duration,
            snippet_features: features,
            frame_latents,
            annotations: gts,
        });
    }
    Ok(DatasetBundle {
        dataset: Dataset {
            config: config.dataset.clone(),
            class_names,
            concepts,
            profiles,
            snippet_map,
            videos,
        },
        frozen_clip,
        config,
    })
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// One model-ready slice of a video (the whole resized video, or a window).
#[derive(Clone, Debug)]
pub struct PreparedPart {
    pub features: Matrix,
    pub latents: Matrix,
    /// Offset in the video's effective snippet grid.
    pub offset: usize,
    pub window_len: usize,
    pub valid: usize,
    /// Ground truth normalized to this part: (start, end, class name).
    pub gts: Vec<(f64, f64, String)>,
}

#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub video_id: String,
    pub duration: f64,
    /// Seconds per snippet of the effective grid the parts live on.
    pub snippet_seconds: f64,
    pub parts: Vec<PreparedPart>,
}

pub fn preprocess_video(video: &SyntheticVideo, config: &ExperimentConfig) -> Result<PreparedVideo> {
    match config.model.preprocess {
        PreprocessMode::Resize { target_len } => {
            let features = resize_features(&video.snippet_features, target_len)?;
            let latents = resize_features(&video.frame_latents, target_len)?;
            let gts = video
                .annotations
                .iter()
                .map(|a| {
                    (
                        a.start / video.duration,
                        a.end / video.duration,
                        a.class_name.clone(),
                    )
                })
                .collect();
            Ok(PreparedVideo {
                video_id: video.video_id.clone(),
                duration: video.duration,
                snippet_seconds: video.duration / target_len as f64,
                parts: vec![PreparedPart {
                    features,
                    latents,
                    offset: 0,
                    window_len: target_len,
                    valid: target_len,
                    gts,
                }],
            })
        }
        PreprocessMode::Window {
            window_len,
            overlap,
        } => {
            let snip = video.snippet_seconds();
            let feature_windows = slice_windows(&video.snippet_features, window_len, overlap)?;
            let latent_windows = slice_windows(&video.frame_latents, window_len, overlap)?;
            let parts = feature_windows
                .into_iter()
                .zip(latent_windows)
                .map(|(fw, lw)| {
                    debug_assert_eq!(fw.offset, lw.offset);
                    let window_start = fw.offset as f64;
                    let gts = video
                        .annotations
                        .iter()
                        .filter_map(|a| {
                            let s = (a.start / snip).max(window_start);
                            let e = (a.end / snip).min(window_start + fw.valid as f64);
                            // keep fragments covering at least one snippet
                            if e - s >= 1.0 {
                                Some((
                                    (s - window_start) / window_len as f64,
                                    (e - window_start) / window_len as f64,
                                    a.class_name.clone(),
                                ))
                            } else {
                                None
                            }
                        })
                        .collect();
                    PreparedPart {
                        features: fw.features,
                        latents: lw.features,
                        offset: fw.offset,
                        window_len,
                        valid: fw.valid,
                        gts,
                    }
                })
                .collect();
            Ok(PreparedVideo {
                video_id: video.video_id.clone(),
                duration: video.duration,
                snippet_seconds: snip,
                parts,
            })
        }
    }
}

/// Training samples for the given seen-class list (video parts without any
/// seen-class ground truth are skipped).
pub fn training_samples(
    bundle: &DatasetBundle,
    config: &ExperimentConfig,
    seen: &[String],
) -> Result<Vec<VideoSample>> {
    let mut samples = Vec::new();
    for video in bundle.dataset.videos_of_classes(seen) {
        let prepared = preprocess_video(video, config)?;
        for part in prepared.parts {
            let targets: Vec<PlainTarget> = part
                .gts
                .iter()
                .filter_map(|(s, e, name)| {
                    seen.iter().position(|n| n == name).map(|class| PlainTarget {
                        start: *s,
                        end: *e,
                        class,
                    })
                })
                .collect();
            if targets.is_empty() {
                continue;
            }
            samples.push(VideoSample {
                features: part.features,
                latents: part.latents,
                targets,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyTargets("no training samples for split".into()));
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

/// Builds the full parameter set for a run: frozen mock encoders plus
/// trainable temporal transformer, localizer and finetuning parameters.
pub fn build_model_params(
    bundle: &DatasetBundle,
    config: &ExperimentConfig,
    mode: FinetuneMode,
) -> Result<ParamSet> {
    let mut params = bundle.frozen_clip.clone();
    let rng = Rng::new(config.training.seed);
    params.merge(build_temporal_params(&config.model, &mut rng.derive("temporal")));
    params.merge(build_localizer_params(
        &config.model,
        bundle.dataset.config.snippet_dim,
        &mut rng.derive("localizer"),
    ));
    match mode {
        FinetuneMode::Frozen => {}
        FinetuneMode::Adapter => {
            inject_adapters(&mut params, &config.model, &mut rng.derive("adapter"))?;
        }
        FinetuneMode::Tpt => {
            tpt_prepend(&mut params, &config.model)?;
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: String,
    pub total: f64,
    pub cls: f64,
    pub bbox_l1: f64,
    pub bbox_giou: f64,
    pub actionness: f64,
    pub learning_rate: f64,
}

pub struct TrainedModel {
    pub params: ParamSet,
    pub log: Vec<TrainRecord>,
    pub seen_classes: Vec<String>,
    pub mode: FinetuneMode,
}

fn phase_name(phase: TrainPhase) -> &'static str {
    match phase {
        TrainPhase::OneStage => "one_stage",
        TrainPhase::LocalizerOnly => "localizer",
        TrainPhase::ClassifierOnly => "classifier",
    }
}

/// One optimizer step over a batch: per-sample tapes run in parallel,
/// gradients reduce in sample order, so results do not depend on scheduling.
/// Public so callers can drive custom training schedules.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &ParamSet,
    config: &ExperimentConfig,
    concepts: &ConceptTable,
    seen: &[String],
    mode: FinetuneMode,
    phase: TrainPhase,
    batch: &[&VideoSample],
    weights: &LossWeights,
) -> Result<(BTreeMap<String, Matrix>, LossParts)> {
    let results: Vec<Result<(BTreeMap<String, Matrix>, LossParts)>> = batch
        .par_iter()
        .map(|sample| {
            let tape = Tape::new();
            let binder = Binder::new(&tape, params);
            let (loss, parts) = video_loss(
                &binder,
                &config.model,
                concepts,
                seen,
                mode,
                phase,
                sample,
                weights,
            )?;
            let grads = tape.backward(loss);
            Ok((binder.trainable_grads(&grads), parts))
        })
        .collect();

    let mut grads_sum: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut parts_sum = LossParts::default();
    let n = batch.len() as f64;
    for result in results {
        let (grads, parts) = result?;
        for (name, grad) in grads {
            match grads_sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&grad),
                None => {
                    grads_sum.insert(name, grad);
                }
            }
        }
        parts_sum.cls += parts.cls / n;
        parts_sum.bbox_l1 += parts.bbox_l1 / n;
        parts_sum.bbox_giou += parts.bbox_giou / n;
        parts_sum.actionness += parts.actionness / n;
        parts_sum.total += parts.total / n;
    }
    for grad in grads_sum.values_mut() {
        *grad = grad.scale(1.0 / n);
    }
    Ok((grads_sum, parts_sum))
}

/// Trains on the seen classes of one split. Two-stage structure trains the
/// localizer class-agnostically first, then the classification branch on
/// ground-truth spans.
pub fn train_split(
    bundle: &DatasetBundle,
    config: &ExperimentConfig,
    split: &ZeroShotSplit,
) -> Result<TrainedModel> {
    train_split_with(bundle, config, split, |_, _| Ok(()))
}

/// [`train_split`] with a hook called after every epoch (global epoch index
/// across phases plus the current parameters), e.g. for periodic
/// checkpointing.
pub fn train_split_with(
    bundle: &DatasetBundle,
    config: &ExperimentConfig,
    split: &ZeroShotSplit,
    mut epoch_hook: impl FnMut(usize, &ParamSet) -> Result<()>,
) -> Result<TrainedModel> {
    config.validate()?;
    let mode = config.training.finetune;
    let seen = split.seen.clone();
    // Zero-shot contract: no unseen class name may reach the text encoder
    // during training.
    for name in &seen {
        if split.unseen.contains(name) {
            return Err(Error::Leakage(name.clone()));
        }
    }
    let samples = training_samples(bundle, config, &seen)?;
    let mut params = build_model_params(bundle, config, mode)?;
    let weights = LossWeights::from_config(&config.training, &config.model);
    // The two-stage variant gets the same total optimization budget as the
    // one-stage run, split between its phases.
    let phases: Vec<(TrainPhase, usize)> = match config.structure {
        StructureMode::OneStage => vec![(TrainPhase::OneStage, config.training.epochs)],
        StructureMode::TwoStage => {
            let first = config.training.epochs.div_ceil(2);
            vec![
                (TrainPhase::LocalizerOnly, first),
                (TrainPhase::ClassifierOnly, config.training.epochs - first),
            ]
        }
    };
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut global_epoch = 0usize;
    let shuffle_root = Rng::new(config.training.seed ^ 0x5eed_50f7);
    for (phase, epochs) in phases {
        let mut optimizer = Adam::new(config.training.learning_rate, config.training.grad_clip);
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            shuffle_root
                .derive(&format!("{}/epoch/{epoch}", phase_name(phase)))
                .shuffle(&mut order);
            for chunk in order.chunks(config.training.batch_size) {
                let batch: Vec<&VideoSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let (grads, parts) = train_step(
                    &params,
                    config,
                    &bundle.dataset.concepts,
                    &seen,
                    mode,
                    phase,
                    &batch,
                    &weights,
                )?;
                if !parts.total.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        diagnostics: format!(
                            "phase {} epoch {epoch}: {parts:?}",
                            phase_name(phase)
                        ),
                    });
                }
                optimizer.step(&mut params, &grads);
                log.push(TrainRecord {
                    step,
                    epoch,
                    phase: phase_name(phase).to_string(),
                    total: parts.total,
                    cls: parts.cls,
                    bbox_l1: parts.bbox_l1,
                    bbox_giou: parts.bbox_giou,
                    actionness: parts.actionness,
                    learning_rate: config.training.learning_rate,
                });
                step += 1;
            }
            global_epoch += 1;
            epoch_hook(global_epoch, &params)?;
        }
    }
    Ok(TrainedModel {
        params,
        log,
        seen_classes: seen,
        mode,
    })
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

/// Runs the detector on one prepared video against `active_classes`
/// (test-time label space). Returns final detections in absolute seconds.
pub fn infer_video(
    params: &ParamSet,
    config: &ExperimentConfig,
    concepts: &ConceptTable,
    active_classes: &[String],
    mode: FinetuneMode,
    prepared: &PreparedVideo,
) -> Result<(Vec<Detection>, usize)> {
    let mask_mode = match config.structure {
        StructureMode::TwoStage => MaskMode::HardBoundary,
        StructureMode::OneStage => config.model.mask_mode,
    };
    let k = config.effective_top_k();
    let mut windows = Vec::with_capacity(prepared.parts.len());
    for part in &prepared.parts {
        let tape = Tape::new();
        let binder = Binder::new(&tape, params);
        let frames = encode_frames(&binder, &part.latents)?;
        let ctx = temporal_transform(&binder, &config.model, frames)?;
        let text = encode_text(&binder, &config.model, concepts, active_classes, mode)?;
        let semantic = semantic_representation(ctx, text)?;
        let forward = localizer_forward(&binder, &config.model, &part.features)?;
        let last = forward.layers.last().expect("decoder layers");
        let t = part.features.rows();
        let logits = match mask_mode {
            MaskMode::Soft => classify_masked(last.masks, semantic)?,
            MaskMode::HardBoundary => {
                let starts = last.starts.value();
                let ends = last.ends.value();
                let mut mask = Matrix::zeros(t, config.model.num_queries);
                for q in 0..config.model.num_queries {
                    let col = hard_mask(t, starts.get(q, 0), ends.get(q, 0));
                    for row in 0..t {
                        mask.set(row, q, col.get(row, 0));
                    }
                }
                classify_masked(binder.constant(mask), semantic)?
            }
        };
        let logits_v = logits.value();
        let starts = last.starts.value();
        let ends = last.ends.value();
        let act = last.actionness.value();
        let proposals: Vec<InferenceProposal> = (0..config.model.num_queries)
            .map(|q| InferenceProposal {
                start: starts.get(q, 0),
                end: ends.get(q, 0),
                logits: logits_v.row(q).to_vec(),
                actionness: act.get(q, 0),
            })
            .collect();
        windows.push(WindowDetections {
            offset: part.offset,
            window_len: part.window_len,
            valid: part.valid,
            detections: fuse_and_topk(&proposals, k, config.model.temperature),
        });
    }
    let merged = merge_windows(&windows, prepared.snippet_seconds);
    // Soft-NMS per class (single video here).
    let mut by_class: BTreeMap<usize, Vec<RankedDetection>> = BTreeMap::new();
    for det in merged.detections {
        by_class.entry(det.class_index).or_default().push(det);
    }
    let mut detections = Vec::new();
    for (class_index, group) in by_class {
        for det in soft_nms(
            group,
            config.eval.soft_nms_mode,
            config.eval.soft_nms_iou,
            config.eval.soft_nms_sigma,
            config.eval.min_score,
        ) {
            detections.push(Detection {
                video_id: prepared.video_id.clone(),
                start: det.start,
                end: det.end,
                class_name: active_classes[class_index].clone(),
                score: det.score,
            });
        }
    }
    Ok((detections, merged.clipped))
}

pub struct SplitEval {
    pub split_id: usize,
    pub table: ApTable,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GtEntry>,
    pub clipped: usize,
}

/// Evaluates a trained model on the unseen classes of its split.
pub fn evaluate_split(
    bundle: &DatasetBundle,
    config: &ExperimentConfig,
    split: &ZeroShotSplit,
    trained: &TrainedModel,
) -> Result<SplitEval> {
    let videos = bundle.dataset.videos_of_classes(&split.unseen);
    let prepared: Vec<PreparedVideo> = videos
        .iter()
        .map(|v| preprocess_video(v, config))
        .collect::<Result<_>>()?;
    let results: Vec<Result<(Vec<Detection>, usize)>> = prepared
        .par_iter()
        .map(|p| {
            infer_video(
                &trained.params,
                config,
                &bundle.dataset.concepts,
                &split.unseen,
                trained.mode,
                p,
            )
        })
        .collect();
    let mut detections = Vec::new();
    let mut clipped = 0;
    for result in results {
        let (dets, c) = result?;
        detections.extend(dets);
        clipped += c;
    }
    let ground_truth: Vec<GtEntry> = videos
        .iter()
        .flat_map(|v| {
            v.annotations.iter().map(|a| GtEntry {
                video_id: v.video_id.clone(),
                start: a.start,
                end: a.end,
                class_name: a.class_name.clone(),
            })
        })
        .collect();
    let table = evaluate_map(&detections, &ground_truth, &config.eval.iou_thresholds)?;
    Ok(SplitEval {
        split_id: split.split_id,
        table,
        detections,
        ground_truth,
        clipped,
    })
}

/// Results grid in CSV form: one row per (split, threshold), then per
/// threshold an AVG-over-splits row, then the grand average.
pub fn results_csv(evals: &[SplitEval], thresholds: &[f64]) -> String {
    let mut out = String::from("split_id,threshold,mAP\n");
    for eval in evals {
        for (threshold, map) in &eval.table.rows {
            out.push_str(&format!("{},{threshold:.2},{map:.6}\n", eval.split_id));
        }
    }
    for (i, threshold) in thresholds.iter().enumerate() {
        let mean = evals.iter().map(|e| e.table.rows[i].1).sum::<f64>() / evals.len() as f64;
        out.push_str(&format!("AVG,{threshold:.2},{mean:.6}\n"));
    }
    let grand = evals.iter().map(|e| e.table.average).sum::<f64>() / evals.len() as f64;
    out.push_str(&format!("AVG,AVG,{grand:.6}\n"));
    out
}

/// Grand-average mAP across splits (the AVG cell of the results grid).
pub fn average_map(evals: &[SplitEval]) -> f64 {
    evals.iter().map(|e| e.table.average).sum::<f64>() / evals.len() as f64
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub compat_hash: String,
    pub split_id: usize,
    pub mode: FinetuneMode,
    pub structure: StructureMode,
    pub seen_classes: Vec<String>,
    pub config: ExperimentConfig,
}

/// Saves the trainable partition plus metadata (frozen encoder weights stay
/// with the dataset).
pub fn save_checkpoint(
    path: &Path,
    config: &ExperimentConfig,
    split: &ZeroShotSplit,
    trained: &TrainedModel,
) -> Result<()> {
    let meta = CheckpointMeta {
        compat_hash: format!("{:016x}", config.compat_hash()),
        split_id: split.split_id,
        mode: trained.mode,
        structure: config.structure,
        seen_classes: trained.seen_classes.clone(),
        config: config.clone(),
    };
    let mut trainable = ParamSet::new();
    for (name, param) in trained.params.iter() {
        if param.trainable {
            trainable.insert(name.clone(), param.value.clone(), true);
        }
    }
    let json = serde_json::to_string(&meta).map_err(|e| Error::Serde(e.to_string()))?;
    save_archive(path, &json, &trainable)
}

/// Restores a trained model against a dataset bundle, refusing checkpoints
/// whose configuration hash does not match the requested config.
pub fn load_checkpoint(
    path: &Path,
    bundle: &DatasetBundle,
    config: &ExperimentConfig,
) -> Result<(TrainedModel, CheckpointMeta)> {
    let archive = load_archive(path)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&archive.config_json).map_err(|e| Error::Serde(e.to_string()))?;
    let expected = format!("{:016x}", config.compat_hash());
    if meta.compat_hash != expected {
        return Err(Error::Refusal(format!(
            "checkpoint {} was trained under config hash {} but the current config hashes to {expected}",
            path.display(),
            meta.compat_hash
        )));
    }
    let mut params = build_model_params(bundle, config, meta.mode)?;
    for (name, param) in archive.params.iter() {
        let slot = params.get(name).ok_or_else(|| {
            Error::Format(format!("checkpoint parameter `{name}` unknown to this model"))
        })?;
        if slot.value.shape() != param.value.shape() {
            return Err(Error::Shape {
                left: format!("{:?}", slot.value.shape()),
                right: format!("{:?}", param.value.shape()),
                context: format!("checkpoint parameter `{name}`"),
            });
        }
        *params.value_mut(name) = param.value.clone();
    }
    Ok((
        TrainedModel {
            params,
            log: Vec::new(),
            seen_classes: meta.seen_classes.clone(),
            mode: meta.mode,
        },
        meta,
    ))
}

// ---------------------------------------------------------------------------
// Benchmark preset
// ---------------------------------------------------------------------------

/// The desk-scale benchmark: 20 classes under the 75/25 protocol, 3 random
/// splits, sized to train on a laptop CPU in minutes.
pub fn benchmark_config(seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.dataset.seed = seed;
    config.dataset.videos_per_class = 6;
    config.dataset.noise_feat = 0.2;
    config.dataset.min_instance_frac = 0.10;
    config.dataset.max_instance_frac = 0.28;
    config.dataset.max_sub_actions = 2;
    config.dataset.sub_rotation = 0.4;
    config.dataset.latent_dim = 40;
    config.dataset.concept_separation = 0.25;
    config.model.text_distortion_planes = 8;
    config.training.seed = seed;
    config.training.epochs = 32;
    config.training.learning_rate = 2e-4;
    config.eval.split_seed = seed;
    config.eval.n_splits = 3;
    config
}

/// Predictions in the shared annotation-compatible JSON shape:
/// `{video_id: [{segment: [s, e], label, score}]}`.
pub fn predictions_json(detections: &[Detection]) -> Result<String> {
    #[derive(Serialize)]
    struct Pred<'a> {
        segment: [f64; 2],
        label: &'a str,
        score: f64,
    }
    let mut map: BTreeMap<&str, Vec<Pred>> = BTreeMap::new();
    for det in detections {
        map.entry(det.video_id.as_str()).or_default().push(Pred {
            segment: [det.start, det.end],
            label: &det.class_name,
            score: det.score,
        });
    }
    serde_json::to_string_pretty(&map).map_err(|e| Error::Serde(e.to_string()))
}

pub fn checkpoint_path(dir: &Path, split_id: usize) -> PathBuf {
    dir.join(format!("checkpoint_split{split_id}.bin"))
}

pub fn train_log_path(dir: &Path, split_id: usize) -> PathBuf {
    dir.join(format!("train_log_split{split_id}.jsonl"))
}
