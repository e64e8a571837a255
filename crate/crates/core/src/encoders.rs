//! Frozen mock encoders and the temporal transformer.
//!
//! The text and visual encoders stand in for a contrastively pretrained
//! vision-language model. Both embed the shared concept space through the
//! same frozen orthonormal core, which is what makes zero-shot matching
//! possible; the text channel additionally passes through a small frozen
//! token transformer and a fixed rotation of the latent space (the
//! distortion that finetuning is meant to undo). The temporal transformer
//! is the only trainable piece in this module.

use crate::autodiff::{concat_cols, concat_rows, Var};
use crate::concepts::{multi_plane_rotation, orthonormal_rows, unit_vector, ConceptTable};
use crate::config::{FinetuneMode, ModelConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{Binder, ParamSet};
use crate::rng::Rng;
use crate::synthetic::GeneratorConfig;

pub const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Shared transformer building blocks
// ---------------------------------------------------------------------------

pub fn linear<'t>(binder: &Binder<'t, '_>, x: Var<'t>, prefix: &str) -> Var<'t> {
    x.matmul(binder.var(&format!("{prefix}.w")))
        .add_row(binder.var(&format!("{prefix}.b")))
}

pub fn multi_head_attention<'t>(
    binder: &Binder<'t, '_>,
    x: Var<'t>,
    prefix: &str,
    heads: usize,
) -> Var<'t> {
    let d = x.cols();
    debug_assert_eq!(d % heads, 0);
    let head_dim = d / heads;
    let qkv = linear(binder, x, &format!("{prefix}.qkv"));
    let q = qkv.slice_cols(0, d);
    let k = qkv.slice_cols(d, 2 * d);
    let v = qkv.slice_cols(2 * d, 3 * d);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
        let qh = q.slice_cols(c0, c1);
        let kh = k.slice_cols(c0, c1);
        let vh = v.slice_cols(c0, c1);
        let attn = qh.matmul(kh.transpose()).scale(scale).softmax_rows();
        per_head.push(attn.matmul(vh));
    }
    let merged = concat_cols(binder.tape(), &per_head);
    linear(binder, merged, &format!("{prefix}.out"))
}

/// Pre-norm residual block: attention then MLP (QuickGELU). When
/// `adapter_scale` is set, a bottleneck branch parallel to the MLP is added
/// into the residual stream exactly where the MLP output lands.
pub fn residual_block<'t>(
    binder: &Binder<'t, '_>,
    x: Var<'t>,
    prefix: &str,
    heads: usize,
    adapter_scale: Option<f64>,
) -> Var<'t> {
    let ln1 = x.layer_norm_rows(
        binder.var(&format!("{prefix}.ln1.gamma")),
        binder.var(&format!("{prefix}.ln1.beta")),
        LN_EPS,
    );
    let x = x.add(multi_head_attention(binder, ln1, &format!("{prefix}.attn"), heads));
    let ln2 = x.layer_norm_rows(
        binder.var(&format!("{prefix}.ln2.gamma")),
        binder.var(&format!("{prefix}.ln2.beta")),
        LN_EPS,
    );
    let hidden = linear(binder, ln2, &format!("{prefix}.mlp.fc1")).quick_gelu();
    let mlp = linear(binder, hidden, &format!("{prefix}.mlp.fc2"));
    match adapter_scale {
        Some(scale) => {
            let down = binder.var(&format!("{prefix}.adapter.down"));
            let up = binder.var(&format!("{prefix}.adapter.up"));
            let branch = ln2.matmul(down).relu().matmul(up).scale(scale);
            x.add(mlp).add(branch)
        }
        None => x.add(mlp),
    }
}

pub fn insert_linear(
    set: &mut ParamSet,
    prefix: &str,
    input: usize,
    output: usize,
    sigma: f64,
    rng: &mut Rng,
    trainable: bool,
) {
    set.insert(
        format!("{prefix}.w"),
        Matrix::gaussian(input, output, sigma, rng),
        trainable,
    );
    set.insert(format!("{prefix}.b"), Matrix::zeros(1, output), trainable);
}

pub fn insert_layer_norm(set: &mut ParamSet, prefix: &str, dim: usize, trainable: bool) {
    set.insert(
        format!("{prefix}.gamma"),
        Matrix::filled(1, dim, 1.0),
        trainable,
    );
    set.insert(format!("{prefix}.beta"), Matrix::zeros(1, dim), trainable);
}

fn insert_block(
    set: &mut ParamSet,
    prefix: &str,
    dim: usize,
    mlp_hidden: usize,
    sigma: f64,
    rng: &mut Rng,
    trainable: bool,
) {
    insert_layer_norm(set, &format!("{prefix}.ln1"), dim, trainable);
    insert_linear(set, &format!("{prefix}.attn.qkv"), dim, 3 * dim, sigma, rng, trainable);
    insert_linear(set, &format!("{prefix}.attn.out"), dim, dim, sigma, rng, trainable);
    insert_layer_norm(set, &format!("{prefix}.ln2"), dim, trainable);
    insert_linear(set, &format!("{prefix}.mlp.fc1"), dim, mlp_hidden, sigma, rng, trainable);
    insert_linear(
        set,
        &format!("{prefix}.mlp.fc2"),
        mlp_hidden,
        dim,
        sigma * (dim as f64 / mlp_hidden as f64).sqrt(),
        rng,
        trainable,
    );
}

// ---------------------------------------------------------------------------
// Frozen stand-in weights
// ---------------------------------------------------------------------------

/// Builds the frozen text/visual encoder weights from the dataset seed.
///
/// The visual map is the orthonormal core `E` itself (plus a small bias);
/// the text class embedding is `R * E` where `R` rotates the latent space by
/// `text_distortion` radians in `text_distortion_planes` orthogonal frozen
/// planes. The residual of that rotation has rank `2 * planes`, sized so the
/// adapter bottleneck can express the exact correction.
pub fn build_frozen_clip(
    gen: &GeneratorConfig,
    model: &ModelConfig,
    concepts: &ConceptTable,
) -> Result<ParamSet> {
    model.validate(gen.latent_dim)?;
    let k = concepts.latent_dim();
    let d = model.embed_dim;
    let root = Rng::new(gen.seed).derive("clip");
    let mut set = ParamSet::new();

    // Bias kept small: every frame embedding shares it, so its cosine to a
    // class text vector acts as a class-constant offset in the affinity map.
    let core = orthonormal_rows(k, d, &mut root.derive("core"));
    set.insert(
        "clip.visual.b",
        Matrix::gaussian(1, d, 0.005, &mut root.derive("visual_bias")),
        false,
    );
    let rotation = multi_plane_rotation(
        k,
        model.text_distortion,
        model.text_distortion_planes,
        &mut root.derive("distortion"),
    );
    set.insert("clip.text.class_embed", rotation.matmul(&core), false);
    set.insert("clip.visual.w", core, false);

    let tokens = model.template_tokens();
    if tokens.is_empty() {
        return Err(Error::config("prompt_template", "must contain tokens"));
    }
    let mut template_rows = Matrix::zeros(tokens.len(), d);
    for (i, token) in tokens.iter().enumerate() {
        let mut rng = root.derive(&format!("template/{i}/{token}"));
        let v = unit_vector(d, &mut rng);
        template_rows.row_mut(i).copy_from_slice(&v);
    }
    set.insert("clip.text.template", template_rows, false);

    set.insert(
        "clip.text.pos",
        Matrix::gaussian(model.max_text_len(), d, 0.05, &mut root.derive("text_pos")),
        false,
    );
    // Small block weights: the class-token content must dominate the output,
    // otherwise the per-class transformer residue rivals the cross-class
    // signal margins and unseen-class argmaxes become a lottery.
    let sigma = 0.1 / (d as f64).sqrt();
    for i in 0..model.text_blocks {
        insert_block(
            &mut set,
            &format!("clip.text.block{i}"),
            d,
            model.mlp_ratio * d,
            sigma,
            &mut root.derive(&format!("text_block/{i}")),
            false,
        );
    }
    insert_layer_norm(&mut set, "clip.text.ln_final", d, false);
    Ok(set)
}

/// Trainable temporal-transformer parameters (positional table + blocks).
///
/// Output projections start near zero so the residual blocks are almost the
/// identity at init: the transformer begins by passing the frame embeddings
/// through unchanged (the frozen cross-modal alignment stays intact) and
/// then learns how much temporal mixing to add.
pub fn build_temporal_params(model: &ModelConfig, rng: &mut Rng) -> ParamSet {
    let d = model.embed_dim;
    let mut set = ParamSet::new();
    set.insert(
        "temporal.pos",
        Matrix::gaussian(model.max_positions, d, 0.01, &mut rng.derive("temporal_pos")),
        true,
    );
    let sigma = (1.0 / d as f64).sqrt();
    let sigma_out = 0.01 / (d as f64).sqrt();
    for i in 0..model.temporal_blocks {
        let prefix = format!("temporal.block{i}");
        let mut r = rng.derive(&format!("temporal_block/{i}"));
        insert_layer_norm(&mut set, &format!("{prefix}.ln1"), d, true);
        insert_linear(&mut set, &format!("{prefix}.attn.qkv"), d, 3 * d, sigma, &mut r, true);
        insert_linear(&mut set, &format!("{prefix}.attn.out"), d, d, sigma_out, &mut r, true);
        insert_layer_norm(&mut set, &format!("{prefix}.ln2"), d, true);
        let hidden = model.mlp_ratio * d;
        insert_linear(&mut set, &format!("{prefix}.mlp.fc1"), d, hidden, sigma, &mut r, true);
        insert_linear(&mut set, &format!("{prefix}.mlp.fc2"), hidden, d, sigma_out, &mut r, true);
    }
    set
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Frame latents -> unit-norm frame embeddings (`[T x d]`), row-wise frozen
/// map. Never trained.
pub fn encode_frames<'t>(binder: &Binder<'t, '_>, latents: &Matrix) -> Result<Var<'t>> {
    if latents.rows() == 0 {
        return Err(Error::Degenerate("encode_frames needs at least one row".into()));
    }
    if !latents.is_finite() {
        return Err(Error::NonFinite("frame latents".into()));
    }
    let x = binder.constant(latents.clone());
    Ok(x
        .matmul(binder.var("clip.visual.w"))
        .add_row(binder.var("clip.visual.b"))
        .l2_normalize_rows(NORM_EPS))
}

/// Class names -> unit-norm text embeddings (`[C x d]`), row order matching
/// `class_names`.
///
/// `Frozen` runs the stock encoder; `Adapter` routes every block through its
/// bottleneck branch; `Tpt` swaps the template tokens for the learnable
/// context. Temperature is *not* applied here; the affinity matrix stays a
/// pure cosine map.
pub fn encode_text<'t>(
    binder: &Binder<'t, '_>,
    model: &ModelConfig,
    concepts: &ConceptTable,
    class_names: &[String],
    mode: FinetuneMode,
) -> Result<Var<'t>> {
    if class_names.is_empty() {
        return Err(Error::Degenerate("encode_text needs at least one class".into()));
    }
    let adapter_scale = match mode {
        FinetuneMode::Adapter => Some(model.adapter_scale),
        _ => None,
    };
    let mut rows = Vec::with_capacity(class_names.len());
    for name in class_names {
        let concept = concepts.get(name)?;
        let latent = binder.constant(Matrix::from_vec(1, concept.latent.len(), concept.latent.clone()));
        let class_token = latent.matmul(binder.var("clip.text.class_embed"));
        let context = match mode {
            FinetuneMode::Tpt => binder.var("clip.text.tpt_context"),
            _ => binder.var("clip.text.template"),
        };
        let seq = concat_rows(binder.tape(), &[context, class_token]);
        let len = seq.rows();
        let pos = binder.var("clip.text.pos").slice_rows(0, len);
        let mut x = seq.add(pos);
        for i in 0..model.text_blocks {
            x = residual_block(
                binder,
                x,
                &format!("clip.text.block{i}"),
                model.text_heads,
                adapter_scale,
            );
        }
        let x = x.layer_norm_rows(
            binder.var("clip.text.ln_final.gamma"),
            binder.var("clip.text.ln_final.beta"),
            LN_EPS,
        );
        rows.push(x.slice_rows(len - 1, len));
    }
    Ok(concat_rows(binder.tape(), &rows).l2_normalize_rows(NORM_EPS))
}

/// Contextualizes frame embeddings with the trainable temporal transformer;
/// rows are re-normalized to unit length before fusion.
pub fn temporal_transform<'t>(
    binder: &Binder<'t, '_>,
    model: &ModelConfig,
    frames: Var<'t>,
) -> Result<Var<'t>> {
    let t = frames.rows();
    if t == 0 {
        return Err(Error::Degenerate("temporal_transform needs rows".into()));
    }
    if t > model.max_positions {
        return Err(Error::config(
            "max_positions",
            format!("sequence of length {t} exceeds positional table"),
        ));
    }
    let pos = binder.var("temporal.pos").slice_rows(0, t);
    let mut x = frames.add(pos);
    for i in 0..model.temporal_blocks {
        x = residual_block(
            binder,
            x,
            &format!("temporal.block{i}"),
            model.temporal_heads,
            None,
        );
    }
    Ok(x.l2_normalize_rows(NORM_EPS))
}

/// Affinity fusion: `S = F_ctx * F_text^T`, entries in [-1, 1] when both
/// operands are row-normalized.
pub fn semantic_representation<'t>(frame_ctx: Var<'t>, text: Var<'t>) -> Result<Var<'t>> {
    if frame_ctx.cols() != text.cols() {
        return Err(Error::Shape {
            left: format!("{:?}", frame_ctx.shape()),
            right: format!("{:?}", text.shape()),
            context: "semantic_representation".into(),
        });
    }
    Ok(frame_ctx.matmul(text.transpose()))
}
