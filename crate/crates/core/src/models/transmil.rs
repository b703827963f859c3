//! TransMIL-style classifier: patch instances are embedded, a class token is
//! prepended, and exact multi-head self-attention runs over the bag with no
//! positional term. The class token feeds the head.

use crate::autodiff::{Element, Tape, Var};

use super::layers::{first_token, layer_norm, linear, patchify, prepend_class_token, transformer_block};
use super::{BoundParams, ForwardOptions, ModelError, ModelSpec};

pub fn forward<E: Element>(
    spec: &ModelSpec,
    tape: &mut Tape<E>,
    params: &BoundParams,
    images: Var,
    opts: &ForwardOptions,
) -> Result<Var, ModelError> {
    let patches = patchify(spec, tape, images, opts.token_order.as_deref())?;
    let h = linear(tape, params, "embed", patches)?;
    let h = tape.relu(h);
    let mut x = prepend_class_token(tape, params, h)?;
    for i in 0..spec.depth {
        x = transformer_block(tape, params, &format!("blocks.{i}"), x, spec.heads)?;
    }
    let x = layer_norm(tape, params, "norm", x)?;
    let cls = first_token(tape, x)?;
    linear(tape, params, "head", cls)
}
