//! Synthetic untrimmed-video benchmark.
//!
//! Videos are sequences of latent vectors in the shared concept space.
//! Planted action instances emit rotated variants of their class latent
//! (sub-actions, some shared across classes) plus Gaussian noise; background
//! snippets emit isotropic noise. Snippet features are a frozen random
//! linear map of a local temporal window of latents, so they carry motion
//! cues the per-frame latents lack. Everything is a pure function of the
//! seed: videos can be regenerated one id at a time.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concepts::{rotate_toward, unit_vector, ConceptTable};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

pub const FEATURE_MAGIC: &[u8; 5] = b"ZTAD1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSegment {
    pub start: f64,
    pub end: f64,
    pub class_name: String,
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub duration: f64,
    /// `[T x l]` motion-aware snippet descriptors (f32-rounded).
    pub snippet_features: Matrix,
    /// `[T x k]` pre-encoder visual latents.
    pub frame_latents: Matrix,
    pub annotations: Vec<GroundTruthSegment>,
}

impl SyntheticVideo {
    pub fn num_snippets(&self) -> usize {
        self.snippet_features.rows()
    }

    pub fn snippet_seconds(&self) -> f64 {
        self.duration / self.num_snippets() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Total class count (seen + unseen), THUMOS14-style default of 20.
    pub num_classes: usize,
    pub videos_per_class: usize,
    /// Snippet-count range per video, inclusive.
    pub min_snippets: usize,
    pub max_snippets: usize,
    pub snippet_seconds: f64,
    /// Action instances per video, inclusive range.
    pub min_instances: usize,
    pub max_instances: usize,
    /// Instance length as a fraction of T, inclusive range.
    pub min_instance_frac: f64,
    pub max_instance_frac: f64,
    /// Sub-actions per class, inclusive range (1..=3).
    pub min_sub_actions: usize,
    pub max_sub_actions: usize,
    /// Rotation angle (radians) from the class latent to a class-specific
    /// sub-latent.
    pub sub_rotation: f64,
    /// Rotation angle toward a shared pool direction. Larger than
    /// `sub_rotation`, so shared sub-actions carry little class evidence and
    /// the segment generator has something to suppress.
    pub shared_sub_rotation: f64,
    /// Size of the pool of sub-action directions shared between classes.
    pub shared_pool: usize,
    /// Probability that a multi-sub-action class draws its first sub-action
    /// direction from the shared pool.
    pub shared_prob: f64,
    /// Gaussian noise scale on planted latents.
    pub noise_feat: f64,
    /// Isotropic latent scale for background snippets.
    pub background_scale: f64,
    /// Rejection threshold for pairwise |cosine| between class latents.
    pub concept_separation: f64,
    pub latent_dim: usize,
    pub snippet_dim: usize,
    /// Half-width of the temporal window mixed into each snippet feature.
    pub snippet_window: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 20,
            videos_per_class: 4,
            min_snippets: 80,
            max_snippets: 140,
            snippet_seconds: 1.0,
            min_instances: 1,
            max_instances: 3,
            min_instance_frac: 0.08,
            max_instance_frac: 0.25,
            min_sub_actions: 1,
            max_sub_actions: 3,
            sub_rotation: 0.62,
            shared_sub_rotation: 0.9,
            shared_pool: 4,
            shared_prob: 0.75,
            noise_feat: 0.5,
            background_scale: 1.0,
            concept_separation: crate::concepts::DEFAULT_SEPARATION,
            latent_dim: 32,
            snippet_dim: 48,
            snippet_window: 1,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 4 {
            return Err(Error::config("num_classes", "must be at least 4"));
        }
        if self.videos_per_class == 0 {
            return Err(Error::config("videos_per_class", "must be positive"));
        }
        if self.min_snippets < 2 || self.min_snippets > self.max_snippets {
            return Err(Error::config(
                "min_snippets",
                "need 2 <= min_snippets <= max_snippets",
            ));
        }
        if self.snippet_seconds <= 0.0 {
            return Err(Error::config("snippet_seconds", "must be positive"));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::config(
                "min_instances",
                "need 1 <= min_instances <= max_instances",
            ));
        }
        if !(0.0 < self.min_instance_frac
            && self.min_instance_frac <= self.max_instance_frac
            && self.max_instance_frac <= 1.0)
        {
            return Err(Error::config(
                "min_instance_frac",
                "need 0 < min <= max <= 1",
            ));
        }
        if self.min_sub_actions == 0
            || self.min_sub_actions > self.max_sub_actions
            || self.max_sub_actions > 3
        {
            return Err(Error::config(
                "min_sub_actions",
                "need 1 <= min <= max <= 3",
            ));
        }
        if self.sub_rotation < 0.0 || self.shared_sub_rotation < 0.0 {
            return Err(Error::config("sub_rotation", "must be non-negative"));
        }
        if self.shared_pool == 0 {
            return Err(Error::config("shared_pool", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.shared_prob) {
            return Err(Error::config("shared_prob", "must be within [0, 1]"));
        }
        if self.noise_feat < 0.0 {
            return Err(Error::config("noise_feat", "must be non-negative"));
        }
        if self.background_scale < 0.0 {
            return Err(Error::config("background_scale", "must be non-negative"));
        }
        if !(0.0 < self.concept_separation && self.concept_separation <= 0.9) {
            return Err(Error::config("concept_separation", "must be in (0, 0.9]"));
        }
        if self.latent_dim < 2 {
            return Err(Error::config("latent_dim", "must be at least 2"));
        }
        if self.snippet_dim == 0 {
            return Err(Error::config("snippet_dim", "must be positive"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|i| format!("action_{i:02}"))
            .collect()
    }
}

/// Per-class sub-action latents (each a unit vector in R^k).
#[derive(Clone, Debug)]
pub struct ClassProfile {
    pub sub_latents: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub class_names: Vec<String>,
    pub concepts: ConceptTable,
    pub profiles: Vec<ClassProfile>,
    /// Frozen `[l x (2w+1)k]` map from latent windows to snippet features.
    pub snippet_map: Matrix,
    pub videos: Vec<SyntheticVideo>,
}

impl Dataset {
    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn videos_of_classes(&self, classes: &[String]) -> Vec<&SyntheticVideo> {
        self.videos
            .iter()
            .filter(|v| classes.contains(&v.annotations[0].class_name))
            .collect()
    }
}

pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let class_names = config.class_names();
    let concepts = ConceptTable::build_separated(
        &class_names,
        config.latent_dim,
        config.seed,
        config.concept_separation,
    )?;
    let profiles = build_class_profiles(config, &concepts, &root);
    let window_cols = (2 * config.snippet_window + 1) * config.latent_dim;
    let snippet_map = Matrix::gaussian(
        config.snippet_dim,
        window_cols,
        1.0 / (window_cols as f64).sqrt(),
        &mut root.derive("snippet_map"),
    );

    let mut videos = Vec::with_capacity(config.num_classes * config.videos_per_class);
    for class_idx in 0..config.num_classes {
        for instance in 0..config.videos_per_class {
            let global = class_idx * config.videos_per_class + instance;
            let video_id = format!("video_{global:04}");
            videos.push(generate_video(
                config,
                &root,
                &class_names[class_idx],
                &profiles[class_idx],
                &snippet_map,
                &video_id,
            ));
        }
    }
    Ok(Dataset {
        config: config.clone(),
        class_names,
        concepts,
        profiles,
        snippet_map,
        videos,
    })
}

fn build_class_profiles(
    config: &GeneratorConfig,
    concepts: &ConceptTable,
    root: &Rng,
) -> Vec<ClassProfile> {
    let pool: Vec<Vec<f64>> = (0..config.shared_pool)
        .map(|m| unit_vector(config.latent_dim, &mut root.derive(&format!("pool/{m}"))))
        .collect();
    concepts
        .iter()
        .map(|concept| {
            let mut rng = root.derive(&format!("profile/{}", concept.name));
            let n_sub = rng.range_inclusive(config.min_sub_actions, config.max_sub_actions);
            let sub_latents = (0..n_sub)
                .map(|j| {
                    let shared =
                        j == 0 && n_sub >= 2 && rng.bernoulli(config.shared_prob);
                    if shared {
                        let toward = pool[rng.below(pool.len())].clone();
                        rotate_toward(&concept.latent, &toward, config.shared_sub_rotation)
                    } else {
                        let toward = unit_vector(config.latent_dim, &mut rng);
                        rotate_toward(&concept.latent, &toward, config.sub_rotation)
                    }
                })
                .collect();
            ClassProfile { sub_latents }
        })
        .collect()
}

fn generate_video(
    config: &GeneratorConfig,
    root: &Rng,
    class_name: &str,
    profile: &ClassProfile,
    snippet_map: &Matrix,
    video_id: &str,
) -> SyntheticVideo {
    let mut layout = root.derive(&format!("layout/{video_id}"));
    let t = layout.range_inclusive(config.min_snippets, config.max_snippets);
    let spans = place_instances(config, t, &mut layout);
    let duration = t as f64 * config.snippet_seconds;
    let annotations: Vec<GroundTruthSegment> = spans
        .iter()
        .map(|&(a, b)| GroundTruthSegment {
            start: a as f64 * config.snippet_seconds,
            end: b as f64 * config.snippet_seconds,
            class_name: class_name.to_string(),
        })
        .collect();
    let mut latent_rng = root.derive(&format!("latents/{video_id}"));
    let frame_latents = latents_for_spans(config, profile, t, &spans, &mut latent_rng);
    let snippet_features = snippet_features_from_latents(config, snippet_map, &frame_latents);
    SyntheticVideo {
        video_id: video_id.to_string(),
        duration,
        snippet_features,
        frame_latents,
        annotations,
    }
}

/// Non-overlapping `(start, end)` snippet spans, sorted by start, at least
/// one always placed.
fn place_instances(config: &GeneratorConfig, t: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let wanted = rng.range_inclusive(config.min_instances, config.max_instances);
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..50 {
            let frac = rng.uniform_in(config.min_instance_frac, config.max_instance_frac);
            let len = ((frac * t as f64).round() as usize).clamp(2, t);
            if len >= t {
                if spans.is_empty() {
                    spans.push((0, t));
                }
                break;
            }
            let start = rng.below(t - len + 1);
            let end = start + len;
            // one-snippet gap between instances
            let clash = spans
                .iter()
                .any(|&(s, e)| start < e + 1 && s < end + 1);
            if !clash {
                spans.push((start, end));
                break;
            }
        }
    }
    if spans.is_empty() {
        let len = (t / 4).max(2).min(t);
        spans.push((0, len));
    }
    spans.sort_unstable();
    spans
}

/// Latent rows for a video: sub-action latents plus noise inside spans,
/// isotropic noise outside. Draws exactly `k` normal samples per row so the
/// stream layout depends only on `(T, k)`.
fn latents_for_spans(
    config: &GeneratorConfig,
    profile: &ClassProfile,
    t: usize,
    spans: &[(usize, usize)],
    rng: &mut Rng,
) -> Matrix {
    let k = config.latent_dim;
    let inv_sqrt_k = 1.0 / (k as f64).sqrt();
    let mut out = Matrix::zeros(t, k);
    for row in 0..t {
        let noise: Vec<f64> = (0..k).map(|_| rng.normal() * inv_sqrt_k).collect();
        let assignment = spans.iter().find(|&&(s, e)| row >= s && row < e);
        let dest = out.row_mut(row);
        match assignment {
            Some(&(s, e)) => {
                let sub = sub_action_index(profile.sub_latents.len(), s, e, row);
                let base = &profile.sub_latents[sub];
                for j in 0..k {
                    dest[j] = base[j] + config.noise_feat * noise[j];
                }
            }
            None => {
                for j in 0..k {
                    dest[j] = config.background_scale * noise[j];
                }
            }
        }
    }
    out
}

/// Which sub-action covers `row` when `[start, end)` is cut into `n_sub`
/// contiguous equal parts.
fn sub_action_index(n_sub: usize, start: usize, end: usize, row: usize) -> usize {
    let len = end - start;
    let offset = row - start;
    ((offset * n_sub) / len).min(n_sub - 1)
}

/// Snippet features: frozen linear map of the `[t-w ..= t+w]` latent window
/// (edge-clamped), rounded to f32 so in-memory values round-trip the on-disk
/// format exactly.
pub fn snippet_features_from_latents(
    config: &GeneratorConfig,
    snippet_map: &Matrix,
    latents: &Matrix,
) -> Matrix {
    let t = latents.rows();
    let k = latents.cols();
    let w = config.snippet_window;
    let mut windowed = Matrix::zeros(t, (2 * w + 1) * k);
    for row in 0..t {
        for (slot, delta) in (-(w as isize)..=w as isize).enumerate() {
            let src = (row as isize + delta).clamp(0, t as isize - 1) as usize;
            let dest = windowed.row_mut(row);
            dest[slot * k..(slot + 1) * k].copy_from_slice(latents.row(src));
        }
    }
    windowed
        .matmul(&snippet_map.transpose())
        .map(|v| v as f32 as f64)
}

/// Regenerates a video's frame latents from the persisted artifacts: the
/// annotation spans, snippet count and class profile fully determine the
/// latent stream for `(seed, video_id)`.
pub fn regenerate_latents(
    config: &GeneratorConfig,
    profile: &ClassProfile,
    video_id: &str,
    t: usize,
    duration: f64,
    annotations: &[GroundTruthSegment],
) -> Matrix {
    let snip = duration / t as f64;
    let spans: Vec<(usize, usize)> = annotations
        .iter()
        .map(|a| {
            let s = (a.start / snip).round() as usize;
            let e = (a.end / snip).round() as usize;
            (s.min(t), e.min(t))
        })
        .collect();
    let root = Rng::new(config.seed);
    let mut rng = root.derive(&format!("latents/{video_id}"));
    latents_for_spans(config, profile, t, &spans, &mut rng)
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Linear interpolation along the temporal axis with endpoints fixed.
pub fn resize_features(features: &Matrix, target_t: usize) -> Result<Matrix> {
    let t = features.rows();
    if t < 2 {
        return Err(Error::Degenerate(format!(
            "resize_features needs at least 2 rows, got {t}"
        )));
    }
    if target_t < 2 {
        return Err(Error::Degenerate(format!(
            "resize_features target must be at least 2, got {target_t}"
        )));
    }
    let mut out = Matrix::zeros(target_t, features.cols());
    let scale = (t - 1) as f64 / (target_t - 1) as f64;
    for i in 0..target_t {
        let pos = i as f64 * scale;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = pos - lo as f64;
        let dest = out.row_mut(i);
        let a = features.row(lo);
        let b = features.row(hi);
        for j in 0..dest.len() {
            dest[j] = (1.0 - frac) * a[j] + frac * b[j];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FeatureWindow {
    pub features: Matrix,
    /// Snippet offset of the window within the source video.
    pub offset: usize,
    /// Number of valid (non-padded) rows.
    pub valid: usize,
}

/// Cuts features into fixed-length windows.
///
/// Stride is `round(window_len * (1 - overlap))`. Windows start at multiples
/// of the stride; when those do not reach the tail, a final window anchored
/// at `T - window_len` is appended so coverage of `[0, T)` is exact. Inputs
/// shorter than the window produce a single zero-padded window.
pub fn slice_windows(
    features: &Matrix,
    window_len: usize,
    overlap: f64,
) -> Result<Vec<FeatureWindow>> {
    if window_len < 2 {
        return Err(Error::config("window_len", "must be at least 2"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::config("overlap", "must be within [0, 1)"));
    }
    let t = features.rows();
    let cols = features.cols();
    if t < window_len {
        let mut padded = Matrix::zeros(window_len, cols);
        for i in 0..t {
            padded.row_mut(i).copy_from_slice(features.row(i));
        }
        return Ok(vec![FeatureWindow {
            features: padded,
            offset: 0,
            valid: t,
        }]);
    }
    let stride = ((window_len as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut offsets: Vec<usize> = Vec::new();
    let mut start = 0;
    while start + window_len <= t {
        offsets.push(start);
        start += stride;
    }
    let last = *offsets.last().expect("at least one window fits");
    if last < t - window_len {
        offsets.push(t - window_len);
    }
    Ok(offsets
        .into_iter()
        .map(|offset| {
            let mut m = Matrix::zeros(window_len, cols);
            for i in 0..window_len {
                m.row_mut(i).copy_from_slice(features.row(offset + i));
            }
            FeatureWindow {
                features: m,
                offset,
                valid: window_len,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Annotation JSON payload: `{video_id: {duration, annotations: [...]}}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VideoAnnotationRecord {
    pub duration: f64,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AnnotationRecord {
    pub segment: [f64; 2],
    pub label: String,
}

pub type AnnotationIndex = BTreeMap<String, VideoAnnotationRecord>;

pub fn annotation_index(videos: &[SyntheticVideo]) -> AnnotationIndex {
    videos
        .iter()
        .map(|v| {
            (
                v.video_id.clone(),
                VideoAnnotationRecord {
                    duration: v.duration,
                    annotations: v
                        .annotations
                        .iter()
                        .map(|a| AnnotationRecord {
                            segment: [a.start, a.end],
                            label: a.class_name.clone(),
                        })
                        .collect(),
                },
            )
        })
        .collect()
}

pub fn write_annotations(path: &Path, index: &AnnotationIndex) -> Result<()> {
    let json = serde_json::to_string_pretty(index).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<AnnotationIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))
}

/// Writes a `[T x l]` matrix as magic + LE u32 dims + row-major LE f32.
pub fn write_feature_file(path: &Path, features: &Matrix) -> Result<()> {
    let mut buf =
        Vec::with_capacity(FEATURE_MAGIC.len() + 8 + features.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &v in features.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Matrix> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let mut dims = [0u8; 8];
    file.read_exact(&mut dims).map_err(|e| Error::io(path, e))?;
    let rows = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; rows * cols * 4];
    file.read_exact(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn write_class_list(path: &Path, names: &[String]) -> Result<()> {
    let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for name in names {
        writeln!(out, "{name}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
