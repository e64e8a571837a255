//! Dual-localization network.
//!
//! A 1D deformable-attention encoder-decoder over projected snippet
//! features. Every decoder layer feeds three heads: boundary regression
//! (normalized midpoint/duration), actionness over RoI-aligned encoder
//! features, and the segment generator producing a soft mask over snippets.
//! Classification happens by aggregating the semantic representation under
//! that mask.

use crate::autodiff::{concat_cols, concat_rows, Var};
use crate::config::ModelConfig;
use crate::encoders::{insert_layer_norm, insert_linear, linear, multi_head_attention, LN_EPS};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{Binder, ParamSet};
use crate::rng::Rng;

/// Base magnitude of the per-point offset bias spread at init.
const OFFSET_INIT_STEP: f64 = 0.02;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

fn insert_deformable(
    set: &mut ParamSet,
    prefix: &str,
    model: &ModelConfig,
    rng: &mut Rng,
) {
    let d = model.embed_dim;
    let hk = model.attn_heads * model.sample_points;
    // Offsets: zero weights, biases spread over the sample points with
    // alternating direction per head (uniform attention at init).
    set.insert(format!("{prefix}.offset.w"), Matrix::zeros(d, hk), true);
    let offset_bias = Matrix::from_fn(1, hk, |_, col| {
        let head = col / model.sample_points;
        let point = col % model.sample_points;
        let sign = if head % 2 == 0 { 1.0 } else { -1.0 };
        sign * OFFSET_INIT_STEP * (point + 1) as f64
    });
    set.insert(format!("{prefix}.offset.b"), offset_bias, true);
    set.insert(format!("{prefix}.attn_weight.w"), Matrix::zeros(d, hk), true);
    set.insert(format!("{prefix}.attn_weight.b"), Matrix::zeros(1, hk), true);
    let sigma = (1.0 / d as f64).sqrt();
    insert_linear(set, &format!("{prefix}.value"), d, d, sigma, rng, true);
    insert_linear(set, &format!("{prefix}.out"), d, d, sigma, rng, true);
}

fn insert_ffn(set: &mut ParamSet, prefix: &str, dim: usize, hidden: usize, rng: &mut Rng) {
    insert_linear(set, &format!("{prefix}.fc1"), dim, hidden, (1.0 / dim as f64).sqrt(), rng, true);
    insert_linear(set, &format!("{prefix}.fc2"), hidden, dim, (1.0 / hidden as f64).sqrt(), rng, true);
}

/// Trainable localizer parameters for snippet features of width `snippet_dim`.
pub fn build_localizer_params(
    model: &ModelConfig,
    snippet_dim: usize,
    rng: &mut Rng,
) -> ParamSet {
    let d = model.embed_dim;
    let mut set = ParamSet::new();
    let r = rng.derive("localizer");

    // Temporal conv, kernel 3, same padding: one matrix per tap.
    let proj_sigma = (1.0 / (3 * snippet_dim) as f64).sqrt();
    for tap in ["prev", "center", "next"] {
        set.insert(
            format!("localizer.input_proj.{tap}"),
            Matrix::gaussian(snippet_dim, d, proj_sigma, &mut r.derive(tap)),
            true,
        );
    }
    set.insert("localizer.input_proj.b", Matrix::zeros(1, d), true);

    for i in 0..model.enc_layers {
        let prefix = format!("localizer.enc{i}");
        insert_layer_norm(&mut set, &format!("{prefix}.ln1"), d, true);
        insert_deformable(&mut set, &format!("{prefix}.attn"), model, &mut r.derive(&prefix));
        insert_layer_norm(&mut set, &format!("{prefix}.ln2"), d, true);
        insert_ffn(&mut set, &format!("{prefix}.ffn"), d, model.ffn_dim, &mut r.derive(&format!("{prefix}.ffn")));
    }

    set.insert(
        "localizer.query_embed",
        Matrix::gaussian(model.num_queries, d, 1.0, &mut r.derive("queries")),
        true,
    );
    insert_linear(&mut set, "localizer.ref_init", d, 2, (1.0 / d as f64).sqrt(), &mut r.derive("ref_init"), true);

    for i in 0..model.dec_layers {
        let prefix = format!("localizer.dec{i}");
        insert_layer_norm(&mut set, &format!("{prefix}.ln1"), d, true);
        let sigma = (1.0 / d as f64).sqrt();
        insert_linear(&mut set, &format!("{prefix}.self_attn.qkv"), d, 3 * d, sigma, &mut r.derive(&format!("{prefix}.qkv")), true);
        insert_linear(&mut set, &format!("{prefix}.self_attn.out"), d, d, sigma, &mut r.derive(&format!("{prefix}.attn_out")), true);
        insert_layer_norm(&mut set, &format!("{prefix}.ln2"), d, true);
        insert_deformable(&mut set, &format!("{prefix}.cross"), model, &mut r.derive(&format!("{prefix}.cross")));
        insert_layer_norm(&mut set, &format!("{prefix}.ln3"), d, true);
        insert_ffn(&mut set, &format!("{prefix}.ffn"), d, model.ffn_dim, &mut r.derive(&format!("{prefix}.ffn")));
    }

    let sigma = (1.0 / d as f64).sqrt();
    insert_linear(&mut set, "localizer.boundary.fc1", d, d, sigma, &mut r.derive("bd1"), true);
    insert_linear(&mut set, "localizer.boundary.fc2", d, d, sigma, &mut r.derive("bd2"), true);
    // Zero-initialized last layer: refinement deltas start at zero, so the
    // references stay at their initial positions until training moves them.
    insert_linear(&mut set, "localizer.boundary.fc3", d, 2, 0.0, &mut r.derive("bd3"), true);

    let roi_width = model.roi_bins * d;
    insert_linear(&mut set, "localizer.actionness.fc1", roi_width, d, (1.0 / roi_width as f64).sqrt(), &mut r.derive("act1"), true);
    insert_linear(&mut set, "localizer.actionness.fc2", d, 1, sigma, &mut r.derive("act2"), true);
    set
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// Temporal 1D convolution (kernel 3, stride 1, zero same-padding) mapping
/// snippet features `[T x l]` to the shared width `[T x d]`.
pub fn project_features<'t>(binder: &Binder<'t, '_>, f3d: Var<'t>) -> Var<'t> {
    let t = f3d.rows();
    let cols = f3d.cols();
    let tape = binder.tape();
    let zero_row = binder.constant(Matrix::zeros(1, cols));
    let (prev, next) = if t > 1 {
        (
            concat_rows(tape, &[zero_row, f3d.slice_rows(0, t - 1)]),
            concat_rows(tape, &[f3d.slice_rows(1, t), zero_row]),
        )
    } else {
        (zero_row, zero_row)
    };
    prev.matmul(binder.var("localizer.input_proj.prev"))
        .add(f3d.matmul(binder.var("localizer.input_proj.center")))
        .add(next.matmul(binder.var("localizer.input_proj.next")))
        .add_row(binder.var("localizer.input_proj.b"))
}

/// 1D deformable attention.
///
/// Per head and sample point, an offset and a weight are linear in the
/// query; weights are softmax-normalized over the points of each head; the
/// value sequence is linearly interpolated at `clamp(reference + offset,
/// 0, 1)` (normalized coordinates). `queries` is `[n x d]`, `references`
/// `[n x 1]`, `values` `[T x d]`.
pub fn deformable_attention<'t>(
    binder: &Binder<'t, '_>,
    prefix: &str,
    queries: Var<'t>,
    references: Var<'t>,
    values: Var<'t>,
    model: &ModelConfig,
) -> Var<'t> {
    let d = queries.cols();
    let heads = model.attn_heads;
    let points = model.sample_points;
    let head_dim = d / heads;
    let t = values.rows();
    let offsets = linear(binder, queries, &format!("{prefix}.offset"));
    let weight_logits = linear(binder, queries, &format!("{prefix}.attn_weight"));
    let v = linear(binder, values, &format!("{prefix}.value"));
    let idx_scale = (t.max(1) - 1) as f64;
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let weights = weight_logits
            .slice_cols(h * points, (h + 1) * points)
            .softmax_rows();
        let v_h = v.slice_cols(h * head_dim, (h + 1) * head_dim);
        let mut acc: Option<Var> = None;
        for p in 0..points {
            let col = h * points + p;
            let delta = offsets.slice_cols(col, col + 1);
            let pos = references.add(delta).clamp(0.0, 1.0).scale(idx_scale);
            let sampled = v_h.gather_interp(pos);
            let weighted = sampled.mul_col(weights.slice_cols(p, p + 1));
            acc = Some(match acc {
                Some(sum) => sum.add(weighted),
                None => weighted,
            });
        }
        per_head.push(acc.expect("at least one sample point"));
    }
    let merged = concat_cols(binder.tape(), &per_head);
    linear(binder, merged, &format!("{prefix}.out"))
}

/// Normalized self-coordinates `t / (T-1)` used as encoder references.
fn encoder_references<'t>(binder: &Binder<'t, '_>, t: usize) -> Var<'t> {
    let refs = Matrix::from_fn(t, 1, |i, _| {
        if t == 1 {
            0.0
        } else {
            i as f64 / (t - 1) as f64
        }
    });
    binder.constant(refs)
}

/// Deformable self-attention encoder over the projected sequence.
pub fn encode<'t>(
    binder: &Binder<'t, '_>,
    model: &ModelConfig,
    projected: Var<'t>,
) -> Var<'t> {
    let t = projected.rows();
    let refs = encoder_references(binder, t);
    let mut x = projected;
    for i in 0..model.enc_layers {
        let prefix = format!("localizer.enc{i}");
        let h = x.layer_norm_rows(
            binder.var(&format!("{prefix}.ln1.gamma")),
            binder.var(&format!("{prefix}.ln1.beta")),
            LN_EPS,
        );
        x = x.add(deformable_attention(binder, &format!("{prefix}.attn"), h, refs, h, model));
        let h2 = x.layer_norm_rows(
            binder.var(&format!("{prefix}.ln2.gamma")),
            binder.var(&format!("{prefix}.ln2.beta")),
            LN_EPS,
        );
        let ffn = linear(binder, h2, &format!("{prefix}.ffn.fc1"))
            .relu();
        let ffn = linear(binder, ffn, &format!("{prefix}.ffn.fc2"));
        x = x.add(ffn);
    }
    x
}

pub struct DecoderLayerOutput<'t> {
    /// `[N_q x d]` query embeddings after this layer.
    pub embeddings: Var<'t>,
    /// `[N_q x 2]` refined (midpoint, duration) references in (0, 1). These
    /// are the layer's boundary predictions; the bbox loss supervises them
    /// directly, which is what steers the cross-attention sampling.
    pub references: Var<'t>,
}

/// Decoder: query self-attention plus deformable cross-attention into the
/// encoded sequence. Each layer refines the reference segment by adding the
/// boundary FFN's delta in inverse-sigmoid space; references are detached
/// between layers so every layer's prediction is supervised through its own
/// delta.
pub fn decode<'t>(
    binder: &Binder<'t, '_>,
    model: &ModelConfig,
    f_enc: Var<'t>,
) -> Vec<DecoderLayerOutput<'t>> {
    let mut x = binder.var("localizer.query_embed");
    // Layer 0 trains the reference initializer through its own bbox loss;
    // later layers start from the previous refinement, detached.
    let mut reference_in = linear(binder, x, "localizer.ref_init").sigmoid();
    let mut outputs = Vec::with_capacity(model.dec_layers);
    for i in 0..model.dec_layers {
        let prefix = format!("localizer.dec{i}");
        let h = x.layer_norm_rows(
            binder.var(&format!("{prefix}.ln1.gamma")),
            binder.var(&format!("{prefix}.ln1.beta")),
            LN_EPS,
        );
        x = x.add(multi_head_attention(binder, h, &format!("{prefix}.self_attn"), model.attn_heads));
        let h2 = x.layer_norm_rows(
            binder.var(&format!("{prefix}.ln2.gamma")),
            binder.var(&format!("{prefix}.ln2.beta")),
            LN_EPS,
        );
        let midpoints = reference_in.slice_cols(0, 1);
        x = x.add(deformable_attention(
            binder,
            &format!("{prefix}.cross"),
            h2,
            midpoints,
            f_enc,
            model,
        ));
        let h3 = x.layer_norm_rows(
            binder.var(&format!("{prefix}.ln3.gamma")),
            binder.var(&format!("{prefix}.ln3.beta")),
            LN_EPS,
        );
        let ffn = linear(binder, h3, &format!("{prefix}.ffn.fc1")).relu();
        x = x.add(linear(binder, ffn, &format!("{prefix}.ffn.fc2")));
        let delta = boundary_logits(binder, x);
        let references = reference_in.inv_sigmoid(1e-6).add(delta).sigmoid();
        reference_in = binder.constant((*references.value()).clone());
        outputs.push(DecoderLayerOutput {
            embeddings: x,
            references,
        });
    }
    outputs
}

/// The boundary FFN before the sigmoid: 3 linear layers, hidden d, ReLU.
pub fn boundary_logits<'t>(binder: &Binder<'t, '_>, embeddings: Var<'t>) -> Var<'t> {
    let h = linear(binder, embeddings, "localizer.boundary.fc1").relu();
    let h = linear(binder, h, "localizer.boundary.fc2").relu();
    linear(binder, h, "localizer.boundary.fc3")
}

/// Boundary regression: `sigmoid(FFN(F_dec))` giving `[n x 2]` normalized
/// (midpoint, duration) pairs.
pub fn boundary_head<'t>(binder: &Binder<'t, '_>, embeddings: Var<'t>) -> Var<'t> {
    boundary_logits(binder, embeddings).sigmoid()
}

/// 1D RoIAlign over `[T x d]` features for a normalized segment, `bins`
/// output rows, `samples_per_bin` interpolation samples averaged per bin.
/// Differentiable with respect to the features and both endpoints.
pub fn roi_align_1d<'t>(
    binder: &Binder<'t, '_>,
    f_enc: Var<'t>,
    start: Var<'t>,
    end: Var<'t>,
    bins: usize,
    samples_per_bin: usize,
) -> Result<Var<'t>> {
    let s = start.scalar_value();
    let e = end.scalar_value();
    if s >= e {
        return Err(Error::DegenerateSegment { start: s, end: e });
    }
    let t = f_enc.rows();
    let total = bins * samples_per_bin;
    // Fractions of the segment at which samples are taken.
    let fracs = Matrix::from_fn(total, 1, |i, _| {
        let bin = i / samples_per_bin;
        let sample = i % samples_per_bin;
        (bin as f64 + (sample as f64 + 0.5) / samples_per_bin as f64) / bins as f64
    });
    let one_minus = fracs.map(|f| 1.0 - f);
    let pos = binder
        .constant(one_minus)
        .scale_by(start)
        .add(binder.constant(fracs).scale_by(end))
        .scale((t.max(1) - 1) as f64);
    let sampled = f_enc.gather_interp(pos);
    // Average the samples of each bin with a fixed pooling matrix.
    let pool = Matrix::from_fn(bins, total, |b, i| {
        if i / samples_per_bin == b {
            1.0 / samples_per_bin as f64
        } else {
            0.0
        }
    });
    Ok(binder.constant(pool).matmul(sampled))
}

/// Actionness: flatten the RoI map, FFN with sigmoid. `[1 x 1]` output.
pub fn actionness_head<'t>(binder: &Binder<'t, '_>, f_roi: Var<'t>) -> Var<'t> {
    let (bins, d) = f_roi.shape();
    let flat = f_roi.reshape(1, bins * d);
    let h = linear(binder, flat, "localizer.actionness.fc1").relu();
    linear(binder, h, "localizer.actionness.fc2").sigmoid()
}

/// Segment generator: per-snippet sigmoid of the dot product between the
/// projected snippet features and each decoder embedding. `[T x n]` masks.
pub fn segment_generator<'t>(f3d_projected: Var<'t>, embeddings: Var<'t>) -> Var<'t> {
    f3d_projected.matmul(embeddings.transpose()).sigmoid()
}

/// Mask-aggregated classification: `logits = (1/T) * M^T S` for all masks at
/// once (`[n x C]` output).
pub fn classify_masked<'t>(masks: Var<'t>, semantic: Var<'t>) -> Result<Var<'t>> {
    if masks.rows() != semantic.rows() {
        return Err(Error::Shape {
            left: format!("{:?}", masks.shape()),
            right: format!("{:?}", semantic.shape()),
            context: "classify_masked".into(),
        });
    }
    let t = masks.rows() as f64;
    Ok(masks.transpose().matmul(semantic).scale(1.0 / t))
}

/// Argmax with ties broken by the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Single-proposal form of the classification rule: logits plus class index.
pub fn classify_proposal<'t>(mask: Var<'t>, semantic: Var<'t>) -> Result<(Var<'t>, usize)> {
    let logits = classify_masked(mask, semantic)?;
    let value = logits.value();
    Ok((logits, argmax_lowest(value.row(0))))
}

// ---------------------------------------------------------------------------
// Full forward
// ---------------------------------------------------------------------------

pub struct LayerHeads<'t> {
    pub embeddings: Var<'t>,
    pub references: Var<'t>,
    /// `[N_q x 2]` (midpoint, duration) in (0,1).
    pub boundaries: Var<'t>,
    /// `[N_q x 1]` clamped segment endpoints derived from the boundaries.
    pub starts: Var<'t>,
    pub ends: Var<'t>,
    /// `[N_q x 1]` actionness scores.
    pub actionness: Var<'t>,
    /// `[T x N_q]` segment-generator masks.
    pub masks: Var<'t>,
}

pub struct LocalizerForward<'t> {
    pub projected: Var<'t>,
    pub encoded: Var<'t>,
    pub layers: Vec<LayerHeads<'t>>,
}

/// Runs the full dual-localization stack on one video's snippet features.
pub fn localizer_forward<'t>(
    binder: &Binder<'t, '_>,
    model: &ModelConfig,
    snippet_features: &Matrix,
) -> Result<LocalizerForward<'t>> {
    let t = snippet_features.rows();
    let f3d = binder.constant(snippet_features.clone());
    let projected = project_features(binder, f3d);
    let encoded = encode(binder, model, projected);
    let decoder_layers = decode(binder, model, encoded);
    let duration_floor = binder.constant(Matrix::filled(model.num_queries, 1, 1.0 / t as f64));
    let mut layers = Vec::with_capacity(decoder_layers.len());
    for layer in decoder_layers {
        // The refined reference is the layer's (midpoint, duration) output.
        let boundaries = layer.references;
        let mid = boundaries.slice_cols(0, 1);
        let dur = boundaries.slice_cols(1, 2);
        let half = dur.scale(0.5);
        let starts = mid.sub(half).clamp(0.0, 1.0);
        let ends = mid.add(half).clamp(0.0, 1.0);
        // RoIAlign uses a duration floor of one snippet.
        let half_roi = dur.vmax(duration_floor).scale(0.5);
        let starts_roi = mid.sub(half_roi).clamp(0.0, 1.0);
        let ends_roi = mid.add(half_roi).clamp(0.0, 1.0);
        let mut scores = Vec::with_capacity(model.num_queries);
        for q in 0..model.num_queries {
            let roi = roi_align_1d(
                binder,
                encoded,
                starts_roi.slice_rows(q, q + 1),
                ends_roi.slice_rows(q, q + 1),
                model.roi_bins,
                model.roi_samples_per_bin,
            )?;
            scores.push(actionness_head(binder, roi));
        }
        let actionness = concat_rows(binder.tape(), &scores);
        let masks = segment_generator(projected, layer.embeddings);
        layers.push(LayerHeads {
            embeddings: layer.embeddings,
            references: layer.references,
            boundaries,
            starts,
            ends,
            actionness,
            masks,
        });
    }
    Ok(LocalizerForward {
        projected,
        encoded,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::assert_gradients;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            enc_layers: 2,
            dec_layers: 2,
            num_queries: 3,
            attn_heads: 2,
            sample_points: 2,
            ffn_dim: 16,
            roi_bins: 4,
            roi_samples_per_bin: 2,
            mlp_ratio: 2,
            temporal_blocks: 1,
            temporal_heads: 2,
            text_blocks: 1,
            text_heads: 2,
            max_positions: 16,
            ..ModelConfig::default()
        }
    }

    fn tiny_params(model: &ModelConfig, l: usize, seed: u64) -> ParamSet {
        build_localizer_params(model, l, &mut Rng::new(seed))
    }

    #[test]
    fn projection_with_identity_center_tap_is_identity() {
        let model = tiny_model();
        let d = model.embed_dim;
        let mut params = tiny_params(&model, d, 1);
        *params.value_mut("localizer.input_proj.prev") = Matrix::zeros(d, d);
        *params.value_mut("localizer.input_proj.next") = Matrix::zeros(d, d);
        *params.value_mut("localizer.input_proj.center") = Matrix::identity(d);
        *params.value_mut("localizer.input_proj.b") = Matrix::zeros(1, d);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let mut rng = Rng::new(2);
        let input = Matrix::gaussian(6, d, 1.0, &mut rng);
        let x = binder.constant(input.clone());
        let out = project_features(&binder, x);
        assert_eq!(*out.value(), input);
    }

    #[test]
    fn projection_maps_l_to_d() {
        let model = tiny_model();
        let params = tiny_params(&model, 5, 1);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let x = binder.constant(Matrix::zeros(7, 5));
        let out = project_features(&binder, x);
        assert_eq!(out.shape(), (7, model.embed_dim));
    }

    #[test]
    fn projection_passes_finite_differences() {
        let model = tiny_model();
        let params = tiny_params(&model, 4, 3);
        let mut rng = Rng::new(4);
        let input = Matrix::gaussian(5, 4, 1.0, &mut rng);
        let probe = Matrix::gaussian(5, model.embed_dim, 1.0, &mut rng);
        assert_gradients(&[input], 1e-5, 1e-4, |tape, vars| {
            let binder = Binder::new(tape, &params);
            project_features(&binder, vars[0])
                .mul(binder.constant(probe.clone()))
                .sum_all()
        });
    }

    #[test]
    fn deformable_single_position_reduces_to_projected_value() {
        // All offsets zero, uniform weights, T = 1: every sample hits row 0,
        // so the output is out_proj(value_proj(v0)).
        let model = tiny_model();
        let mut params = tiny_params(&model, 8, 5);
        // offset biases to zero for this check
        *params.value_mut("localizer.enc0.attn.offset.b") =
            Matrix::zeros(1, model.attn_heads * model.sample_points);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let mut rng = Rng::new(6);
        let value = Matrix::gaussian(1, model.embed_dim, 1.0, &mut rng);
        let query = binder.constant(Matrix::gaussian(1, model.embed_dim, 1.0, &mut rng));
        let refs = binder.constant(Matrix::zeros(1, 1));
        let values = binder.constant(value.clone());
        let out = deformable_attention(&binder, "localizer.enc0.attn", query, refs, values, &model);

        let v = value
            .matmul(params.value("localizer.enc0.attn.value.w"))
            .add(params.value("localizer.enc0.attn.value.b"));
        let expected = v
            .matmul(params.value("localizer.enc0.attn.out.w"))
            .add(params.value("localizer.enc0.attn.out.b"));
        for (a, b) in out.value().as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn deformable_constant_rows_ignore_reference() {
        let model = tiny_model();
        let params = tiny_params(&model, 8, 7);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let mut rng = Rng::new(8);
        let row: Vec<f64> = (0..model.embed_dim).map(|_| rng.normal()).collect();
        let mut values = Matrix::zeros(9, model.embed_dim);
        for i in 0..9 {
            values.row_mut(i).copy_from_slice(&row);
        }
        let query = binder.constant(Matrix::gaussian(2, model.embed_dim, 1.0, &mut rng));
        let values = binder.constant(values);
        let out_a = deformable_attention(
            &binder,
            "localizer.enc0.attn",
            query,
            binder.constant(Matrix::from_vec(2, 1, vec![0.1, 0.2])),
            values,
            &model,
        );
        let out_b = deformable_attention(
            &binder,
            "localizer.enc0.attn",
            query,
            binder.constant(Matrix::from_vec(2, 1, vec![0.9, 0.5])),
            values,
            &model,
        );
        for (a, b) in out_a.value().as_slice().iter().zip(out_b.value().as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deformable_output_is_convex_combination_per_head() {
        // With an identity output projection, each head's channels must stay
        // within the min/max of the projected value channels: the sampled
        // rows are interpolations and the point weights are a softmax.
        let model = tiny_model();
        let mut params = tiny_params(&model, 8, 9);
        let d = model.embed_dim;
        *params.value_mut("localizer.enc0.attn.out.w") = Matrix::identity(d);
        *params.value_mut("localizer.enc0.attn.out.b") = Matrix::zeros(1, d);
        // Non-trivial weights and offsets.
        let mut rng = Rng::new(10);
        *params.value_mut("localizer.enc0.attn.offset.w") =
            Matrix::gaussian(d, model.attn_heads * model.sample_points, 0.3, &mut rng);
        *params.value_mut("localizer.enc0.attn.attn_weight.w") =
            Matrix::gaussian(d, model.attn_heads * model.sample_points, 0.5, &mut rng);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let values_m = Matrix::gaussian(11, d, 1.0, &mut rng);
        let queries = binder.constant(Matrix::gaussian(4, d, 1.0, &mut rng));
        let refs = binder.constant(Matrix::from_vec(4, 1, vec![0.0, 0.3, 0.6, 1.0]));
        let values = binder.constant(values_m.clone());
        let out = deformable_attention(&binder, "localizer.enc0.attn", queries, refs, values, &model);

        let mut projected = values_m.matmul(params.value("localizer.enc0.attn.value.w"));
        let bias = params.value("localizer.enc0.attn.value.b");
        for i in 0..projected.rows() {
            for j in 0..projected.cols() {
                let v = projected.get(i, j) + bias.get(0, j);
                projected.set(i, j, v);
            }
        }
        let head_dim = d / model.attn_heads;
        let out_v = out.value();
        for q in 0..4 {
            for c in 0..d {
                let head = c / head_dim;
                let (lo, hi) = (0..projected.rows())
                    .map(|r| projected.get(r, head * head_dim + (c % head_dim)))
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                let got = out_v.get(q, c);
                assert!(
                    got >= lo - 1e-9 && got <= hi + 1e-9,
                    "channel {c} of query {q} escaped [{lo}, {hi}]: {got}"
                );
            }
        }
    }

    #[test]
    fn encoder_preserves_shape_and_is_deterministic() {
        let model = tiny_model();
        let params = tiny_params(&model, 8, 11);
        let mut rng = Rng::new(12);
        let input = Matrix::gaussian(10, model.embed_dim, 1.0, &mut rng);
        let run = || {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &params);
            let x = binder.constant(input.clone());
            let out = encode(&binder, &model, x);
            assert_eq!(out.shape(), (10, model.embed_dim));
            out.value().as_slice().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_passes_finite_differences() {
        let model = tiny_model();
        let params = tiny_params(&model, 8, 13);
        let mut rng = Rng::new(14);
        let input = Matrix::gaussian(6, model.embed_dim, 1.0, &mut rng);
        let probe = Matrix::gaussian(6, model.embed_dim, 1.0, &mut rng);
        assert_gradients(&[input], 1e-5, 1e-4, |tape, vars| {
            let binder = Binder::new(tape, &params);
            encode(&binder, &model, vars[0])
                .mul(binder.constant(probe.clone()))
                .sum_all()
        });
    }

    #[test]
    fn decoder_emits_all_layers_with_bounded_references() {
        let model = tiny_model();
        let params = tiny_params(&model, 8, 15);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let mut rng = Rng::new(16);
        let f_enc = binder.constant(Matrix::gaussian(10, model.embed_dim, 1.0, &mut rng));
        let layers = decode(&binder, &model, f_enc);
        assert_eq!(layers.len(), model.dec_layers);
        for layer in &layers {
            assert_eq!(layer.embeddings.shape(), (model.num_queries, model.embed_dim));
            assert_eq!(layer.references.shape(), (model.num_queries, 2));
            let refs = layer.references.value();
            for v in refs.as_slice() {
                assert!(*v > 0.0 && *v < 1.0, "reference {v} escaped (0,1)");
            }
        }
    }

    #[test]
    fn zero_refinement_keeps_references_constant() {
        let model = tiny_model();
        let params = tiny_params(&model, 8, 17);
        // refine layers are zero-initialized by construction
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let mut rng = Rng::new(18);
        let f_enc = binder.constant(Matrix::gaussian(9, model.embed_dim, 1.0, &mut rng));
        let layers = decode(&binder, &model, f_enc);
        let first = layers[0].references.value();
        for layer in &layers[1..] {
            let refs = layer.references.value();
            for (a, b) in first.as_slice().iter().zip(refs.as_slice()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn boundary_head_of_zero_logits_is_half() {
        let model = tiny_model();
        let mut params = tiny_params(&model, 8, 19);
        let d = model.embed_dim;
        for name in ["fc1", "fc2", "fc3"] {
            let w = params.value_mut(&format!("localizer.boundary.{name}.w"));
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        let _ = d;
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let emb = binder.constant(Matrix::filled(2, model.embed_dim, 0.4));
        let out = boundary_head(&binder, emb);
        for v in out.value().as_slice() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn boundary_head_stays_in_unit_square_and_passes_fd() {
        let model = tiny_model();
        let params = tiny_params(&model, 8, 20);
        let mut rng = Rng::new(21);
        let emb = Matrix::gaussian(3, model.embed_dim, 1.5, &mut rng);
        {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &params);
            let out = boundary_head(&binder, binder.constant(emb.clone()));
            for v in out.value().as_slice() {
                assert!(*v > 0.0 && *v < 1.0);
            }
        }
        let probe = Matrix::gaussian(3, 2, 1.0, &mut rng);
        // Gradient with respect to the FFN parameters themselves.
        let w1 = params.value("localizer.boundary.fc1.w").clone();
        let w3 = params.value("localizer.boundary.fc3.w").clone();
        assert_gradients(&[w1, w3], 1e-5, 1e-4, |tape, vars| {
            let mut local = params.clone();
            *local.value_mut("localizer.boundary.fc1.w") = (*vars[0].value()).clone();
            *local.value_mut("localizer.boundary.fc3.w") = (*vars[1].value()).clone();
            let tape_binder = Binder::new(tape, &local);
            // Rebuild through leafs: bind the perturbed weights directly.
            let h = vars[0]; // placeholder to keep shapes; actual path below
            let _ = h;
            let emb_v = tape_binder.constant(emb.clone());
            let fc1 = emb_v.matmul(vars[0]).add_row(tape_binder.var("localizer.boundary.fc1.b")).relu();
            let fc2 = linear(&tape_binder, fc1, "localizer.boundary.fc2").relu();
            let out = fc2.matmul(vars[1]).add_row(tape_binder.var("localizer.boundary.fc3.b")).sigmoid();
            out.mul(tape_binder.constant(probe.clone())).sum_all()
        });
    }

    #[test]
    fn roi_align_constant_features_fill_every_bin() {
        let model = tiny_model();
        let params = tiny_params(&model, 8, 22);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let row: Vec<f64> = (0..model.embed_dim).map(|i| i as f64).collect();
        let mut features = Matrix::zeros(12, model.embed_dim);
        for i in 0..12 {
            features.row_mut(i).copy_from_slice(&row);
        }
        let f = binder.constant(features);
        let start = binder.constant(Matrix::filled(1, 1, 0.2));
        let end = binder.constant(Matrix::filled(1, 1, 0.8));
        let roi = roi_align_1d(&binder, f, start, end, model.roi_bins, 2).unwrap();
        assert_eq!(roi.shape(), (model.roi_bins, model.embed_dim));
        for b in 0..model.roi_bins {
            for (j, expected) in row.iter().enumerate() {
                assert!((roi.value().get(b, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_align_recovers_a_linear_ramp() {
        // Features are a linear ramp in time; with the segment covering the
        // whole clip, bin centers must reproduce the ramp exactly (linear
        // interpolation of a linear function is exact).
        let model = tiny_model();
        let params = tiny_params(&model, 8, 23);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let t = 9;
        let features = Matrix::from_fn(t, 2, |i, j| (i as f64) * (j as f64 + 1.0));
        let f = binder.constant(features);
        let start = binder.constant(Matrix::filled(1, 1, 0.0));
        let end = binder.constant(Matrix::filled(1, 1, 1.0));
        let bins = 4;
        let roi = roi_align_1d(&binder, f, start, end, bins, 2).unwrap();
        for b in 0..bins {
            // Average of the two sample positions of bin b, on the ramp.
            let p0 = (b as f64 + 0.25) / bins as f64 * (t - 1) as f64;
            let p1 = (b as f64 + 0.75) / bins as f64 * (t - 1) as f64;
            let expected = (p0 + p1) / 2.0;
            assert!((roi.value().get(b, 0) - expected).abs() < 1e-10);
            assert!((roi.value().get(b, 1) - 2.0 * expected).abs() < 1e-10);
        }
    }

    #[test]
    fn roi_align_rejects_degenerate_segments() {
        let model = tiny_model();
        let params = tiny_params(&model, 8, 24);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let f = binder.constant(Matrix::zeros(5, model.embed_dim));
        let start = binder.constant(Matrix::filled(1, 1, 0.6));
        let end = binder.constant(Matrix::filled(1, 1, 0.6));
        assert!(matches!(
            roi_align_1d(&binder, f, start, end, 4, 2),
            Err(Error::DegenerateSegment { .. })
        ));
    }

    #[test]
    fn roi_align_passes_fd_including_endpoints() {
        let model = tiny_model();
        let params = tiny_params(&model, 8, 25);
        let mut rng = Rng::new(26);
        let features = Matrix::gaussian(8, 4, 1.0, &mut rng);
        let start = Matrix::filled(1, 1, 0.17);
        let end = Matrix::filled(1, 1, 0.81);
        let probe = Matrix::gaussian(3, 4, 1.0, &mut rng);
        assert_gradients(&[features, start, end], 1e-6, 1e-4, |tape, vars| {
            let binder = Binder::new(tape, &params);
            let roi = roi_align_1d(&binder, vars[0], vars[1], vars[2], 3, 2).unwrap();
            roi.mul(binder.constant(probe.clone())).sum_all()
        });
    }

    #[test]
    fn actionness_zero_logit_is_half_and_in_range() {
        let model = tiny_model();
        let mut params = tiny_params(&model, 8, 27);
        for name in ["fc1", "fc2"] {
            let w = params.value_mut(&format!("localizer.actionness.{name}.w"));
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let roi = binder.constant(Matrix::filled(model.roi_bins, model.embed_dim, 0.3));
        let a = actionness_head(&binder, roi);
        assert_eq!(a.value().scalar(), 0.5);
    }

    #[test]
    fn actionness_passes_fd() {
        let model = tiny_model();
        let params = tiny_params(&model, 8, 28);
        let mut rng = Rng::new(29);
        let roi = Matrix::gaussian(model.roi_bins, model.embed_dim, 1.0, &mut rng);
        assert_gradients(&[roi], 1e-5, 1e-4, |tape, vars| {
            let binder = Binder::new(tape, &params);
            actionness_head(&binder, vars[0])
        });
    }

    #[test]
    fn segment_generator_matches_sigmoid_dot_oracle() {
        let tape = Tape::new();
        let mut rng = Rng::new(30);
        let proj = Matrix::gaussian(7, 6, 1.0, &mut rng);
        let dec = Matrix::gaussian(2, 6, 1.0, &mut rng);
        let masks = segment_generator(tape.leaf(proj.clone()), tape.leaf(dec.clone()));
        assert_eq!(masks.shape(), (7, 2));
        for t in 0..7 {
            for q in 0..2 {
                let dot: f64 = proj.row(t).iter().zip(dec.row(q)).map(|(a, b)| a * b).sum();
                let expected = 1.0 / (1.0 + (-dot).exp());
                assert!((masks.value().get(t, q) - expected).abs() < 1e-6);
                let v = masks.value().get(t, q);
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn zero_embedding_gives_half_mask() {
        let tape = Tape::new();
        let proj = tape.leaf(Matrix::filled(4, 3, 0.7));
        let dec = tape.leaf(Matrix::zeros(1, 3));
        let masks = segment_generator(proj, dec);
        for v in masks.value().as_slice() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn segment_generator_passes_fd() {
        let mut rng = Rng::new(31);
        let proj = Matrix::gaussian(6, 5, 1.0, &mut rng);
        let dec = Matrix::gaussian(2, 5, 1.0, &mut rng);
        let probe = Matrix::gaussian(6, 2, 1.0, &mut rng);
        assert_gradients(&[proj, dec], 1e-6, 1e-4, |tape, vars| {
            segment_generator(vars[0], vars[1])
                .mul(tape.leaf(probe.clone()))
                .sum_all()
        });
    }

    #[test]
    fn classify_masked_matches_weighted_mean_oracle() {
        let tape = Tape::new();
        let mut rng = Rng::new(32);
        let masks = Matrix::from_fn(5, 2, |_, _| rng.uniform());
        let s = Matrix::gaussian(5, 3, 1.0, &mut rng);
        let logits = classify_masked(tape.leaf(masks.clone()), tape.leaf(s.clone())).unwrap();
        for q in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for t in 0..5 {
                    acc += masks.get(t, q) * s.get(t, c);
                }
                acc /= 5.0;
                assert!((logits.value().get(q, c) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classify_proposal_rules() {
        let tape = Tape::new();
        // All-ones mask with one-hot S on class 1 peaks there with value 1.
        let mask = tape.leaf(Matrix::filled(4, 1, 1.0));
        let mut s = Matrix::zeros(4, 3);
        for t in 0..4 {
            s.set(t, 1, 1.0);
        }
        let (logits, idx) = classify_proposal(mask, tape.leaf(s)).unwrap();
        assert_eq!(idx, 1);
        assert!((logits.value().get(0, 1) - 1.0).abs() < 1e-12);

        // All-zero mask: zero logits, tie broken toward index 0.
        let zero_mask = tape.leaf(Matrix::zeros(4, 1));
        let s2 = tape.leaf(Matrix::filled(4, 3, 0.5));
        let (logits2, idx2) = classify_proposal(zero_mask, s2).unwrap();
        assert_eq!(idx2, 0);
        for v in logits2.value().as_slice() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn classify_argmax_invariant_to_positive_scaling() {
        let tape = Tape::new();
        let mut rng = Rng::new(33);
        let masks = Matrix::from_fn(6, 1, |_, _| rng.uniform());
        let s = Matrix::gaussian(6, 4, 1.0, &mut rng);
        let (_, base) =
            classify_proposal(tape.leaf(masks.clone()), tape.leaf(s.clone())).unwrap();
        let (_, scaled_mask) =
            classify_proposal(tape.leaf(masks.scale(3.7)), tape.leaf(s.clone())).unwrap();
        let (_, scaled_s) = classify_proposal(tape.leaf(masks), tape.leaf(s.scale(0.4))).unwrap();
        assert_eq!(base, scaled_mask);
        assert_eq!(base, scaled_s);
    }

    #[test]
    fn full_forward_produces_consistent_shapes() {
        let model = tiny_model();
        let params = tiny_params(&model, 6, 34);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params);
        let mut rng = Rng::new(35);
        let features = Matrix::gaussian(12, 6, 1.0, &mut rng);
        let forward = localizer_forward(&binder, &model, &features).unwrap();
        assert_eq!(forward.projected.shape(), (12, model.embed_dim));
        assert_eq!(forward.encoded.shape(), (12, model.embed_dim));
        assert_eq!(forward.layers.len(), model.dec_layers);
        for layer in &forward.layers {
            assert_eq!(layer.boundaries.shape(), (model.num_queries, 2));
            assert_eq!(layer.actionness.shape(), (model.num_queries, 1));
            assert_eq!(layer.masks.shape(), (12, model.num_queries));
            let starts = layer.starts.value();
            let ends = layer.ends.value();
            for q in 0..model.num_queries {
                assert!(starts.get(q, 0) <= ends.get(q, 0));
                let a = layer.actionness.value().get(q, 0);
                assert!(a > 0.0 && a < 1.0);
            }
        }
        // Repeated forward passes agree bitwise.
        let tape2 = Tape::new();
        let binder2 = Binder::new(&tape2, &params);
        let again = localizer_forward(&binder2, &model, &features).unwrap();
        assert_eq!(
            forward.layers[1].masks.value().as_slice(),
            again.layers[1].masks.value().as_slice()
        );
    }
}
