//! Minimal-ViT: conventional compact ViT with learned positional embeddings
//! and class-token readout at a single width.

use crate::autodiff::{Element, Tape, Var};

use super::layers::{first_token, layer_norm, linear, patchify, prepend_class_token, transformer_block};
use super::{BoundParams, ForwardOptions, ModelError, ModelSpec, Readout};

pub fn forward<E: Element>(
    spec: &ModelSpec,
    tape: &mut Tape<E>,
    params: &BoundParams,
    images: Var,
    opts: &ForwardOptions,
) -> Result<Var, ModelError> {
    let patches = patchify(spec, tape, images, opts.token_order.as_deref())?;
    let tokens = linear(tape, params, "patch_embed", patches)?;
    let x = prepend_class_token(tape, params, tokens)?;
    let pos = params.get("pos_embed")?;
    let mut x = tape.add_broadcast(x, pos)?;
    for i in 0..spec.depth {
        x = transformer_block(tape, params, &format!("blocks.{i}"), x, spec.heads)?;
    }
    let x = layer_norm(tape, params, "norm", x)?;
    let pooled = match opts.readout {
        Readout::ClassToken => first_token(tape, x)?,
        Readout::MeanPool => {
            let t = tape.shape(x)[1];
            let patches = tape.slice(x, 1, 1, t - 1)?;
            tape.mean_axis(patches, 1)?
        }
    };
    linear(tape, params, "head", pooled)
}
