//! ZACH-ViT: no positional embedding, no class token.
//!
//! Patch embedding, then stages of transformer blocks whose width grows per
//! `embed_dims` (the first block of each new stage projects its residual),
//! then global average pooling over all patch tokens and a linear head.

use crate::autodiff::{Element, Tape, Var};

use super::layers::{layer_norm, linear, patchify, transformer_block};
use super::{BoundParams, ForwardOptions, ModelError, ModelSpec};

pub fn forward<E: Element>(
    spec: &ModelSpec,
    tape: &mut Tape<E>,
    params: &BoundParams,
    images: Var,
    opts: &ForwardOptions,
) -> Result<Var, ModelError> {
    let patches = patchify(spec, tape, images, opts.token_order.as_deref())?;
    let mut x = linear(tape, params, "patch_embed", patches)?;
    let blocks = spec.embed_dims.len() * spec.depth;
    for i in 0..blocks {
        x = transformer_block(tape, params, &format!("blocks.{i}"), x, spec.heads)?;
    }
    let x = layer_norm(tape, params, "norm", x)?;
    let pooled = tape.mean_axis(x, 1)?;
    linear(tape, params, "head", pooled)
}
