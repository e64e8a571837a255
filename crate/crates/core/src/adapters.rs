//! Parameter-efficient finetuning of the frozen text encoder.
//!
//! Each transformer block's MLP sub-layer gains a bottleneck branch running
//! in parallel: `frozen_mlp(x) + s * up(relu(down(x)))`. The up-projection
//! starts at zero, so an adapted encoder computes exactly the frozen
//! function until training moves it. Text prompt tuning is the alternative:
//! the fixed template tokens are replaced by learnable context vectors.

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{ParamPartition, ParamSet};
use crate::rng::Rng;

pub const TEXT_SCOPE: &str = "clip.text.";

/// One bottleneck branch: `d -> r -> d`, ReLU in the middle, no biases.
#[derive(Clone, Debug)]
pub struct AdaptMlpBranch {
    pub down: Matrix,
    pub up: Matrix,
    pub scale: f64,
}

impl AdaptMlpBranch {
    /// Kaiming-uniform down-projection, zero up-projection.
    pub fn init(dim: usize, rank: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank >= dim {
            return Err(Error::config("adapter_rank", "must satisfy 1 <= r < d"));
        }
        if scale <= 0.0 {
            return Err(Error::config("adapter_scale", "must be positive"));
        }
        let bound = (6.0 / dim as f64).sqrt();
        Ok(AdaptMlpBranch {
            down: Matrix::uniform_sym(dim, rank, bound, rng),
            up: Matrix::zeros(rank, dim),
            scale,
        })
    }
}

/// `frozen_mlp(x) + s * up(relu(down(x)))`, all on the tape.
pub fn adapt_mlp_forward<'t>(
    x: Var<'t>,
    frozen_mlp: impl FnOnce(Var<'t>) -> Var<'t>,
    down: Var<'t>,
    up: Var<'t>,
    scale: f64,
) -> Var<'t> {
    let branch = x.matmul(down).relu().matmul(up).scale(scale);
    frozen_mlp(x).add(branch)
}

/// Adds a zero-initialized branch to every text block's MLP sub-layer.
///
/// Returns the frozen/trainable partition of the text encoder: trainable is
/// exactly the branch parameters, everything pre-existing stays frozen.
pub fn inject_adapters(
    params: &mut ParamSet,
    model: &ModelConfig,
    rng: &mut Rng,
) -> Result<ParamPartition> {
    let d = model.embed_dim;
    if model.adapter_rank >= d {
        return Err(Error::config(
            "adapter_rank",
            format!("rank {} must be below embed_dim {d}", model.adapter_rank),
        ));
    }
    for i in 0..model.text_blocks {
        let branch = AdaptMlpBranch::init(
            d,
            model.adapter_rank,
            model.adapter_scale,
            &mut rng.derive(&format!("adapter/{i}")),
        )?;
        params.insert(
            format!("clip.text.block{i}.adapter.down"),
            branch.down,
            true,
        );
        params.insert(format!("clip.text.block{i}.adapter.up"), branch.up, true);
    }
    Ok(text_encoder_partition(params))
}

/// Creates the learnable context for text prompt tuning, initialized by
/// tiling the frozen template token vectors so that a context of the
/// template's own length reproduces the frozen encoder exactly at start.
pub fn tpt_prepend(params: &mut ParamSet, model: &ModelConfig) -> Result<ParamPartition> {
    if model.tpt_context_len == 0 {
        return Err(Error::config("tpt_context_len", "must be at least 1"));
    }
    let template = params.value("clip.text.template").clone();
    let d = template.cols();
    let context = Matrix::from_fn(model.tpt_context_len, d, |i, j| {
        template.get(i % template.rows(), j)
    });
    params.insert("clip.text.tpt_context", context, true);
    if model.tpt_context_len > params.value("clip.text.pos").rows() - 1 {
        return Err(Error::config(
            "tpt_context_len",
            "exceeds the text positional table",
        ));
    }
    Ok(text_encoder_partition(params))
}

/// Frozen/trainable partition restricted to the text encoder's parameters.
pub fn text_encoder_partition(params: &ParamSet) -> ParamPartition {
    let mut partition = ParamPartition::default();
    for (name, param) in params.iter() {
        if !name.starts_with(TEXT_SCOPE) {
            continue;
        }
        if param.trainable {
            partition.trainable.push(name.clone());
        } else {
            partition.frozen.push(name.clone());
        }
    }
    partition
}
