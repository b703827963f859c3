//! Gated attention MIL pooling.
//!
//! Each patch is an instance encoded by a shared two-layer MLP into `h_i`.
//! Attention scores are `wᵀ(tanh(V h_i) ⊙ sigmoid(U h_i))`, normalized with a
//! softmax over the instances of one image; the bag vector `Σ a_i h_i` feeds
//! a linear head.

use crate::autodiff::{Element, Tape, Tensor, Var};

use super::layers::{linear, patchify};
use super::{BoundParams, ForwardOptions, ModelError, ModelParams, ModelSpec};

/// Instance features `[b, n, d]` and attention weights `[b, n]`.
fn encode_and_attend<E: Element>(
    spec: &ModelSpec,
    tape: &mut Tape<E>,
    params: &BoundParams,
    images: Var,
    opts: &ForwardOptions,
) -> Result<(Var, Var), ModelError> {
    let patches = patchify(spec, tape, images, opts.token_order.as_deref())?;
    let h = linear(tape, params, "encoder.fc1", patches)?;
    let h = tape.relu(h);
    let h = linear(tape, params, "encoder.fc2", h)?;
    let h = tape.relu(h);
    let v = linear(tape, params, "attention.v", h)?;
    let v = tape.tanh(v);
    let u = linear(tape, params, "attention.u", h)?;
    let u = tape.sigmoid(u);
    let gated = tape.mul(v, u)?;
    let w = params.get("attention.w.weight")?;
    let scores = tape.linear(gated, w, None)?;
    let shape = tape.shape(scores).to_vec();
    let scores = tape.reshape(scores, &[shape[0], shape[1]])?;
    let attn = tape.softmax(scores, 1)?;
    Ok((h, attn))
}

pub fn forward<E: Element>(
    spec: &ModelSpec,
    tape: &mut Tape<E>,
    params: &BoundParams,
    images: Var,
    opts: &ForwardOptions,
) -> Result<Var, ModelError> {
    let (h, attn) = encode_and_attend(spec, tape, params, images, opts)?;
    let shape = tape.shape(h).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let attn = tape.reshape(attn, &[b, 1, n])?;
    let bag = tape.bmm(attn, h, false)?;
    let bag = tape.reshape(bag, &[b, d])?;
    linear(tape, params, "head", bag)
}

/// Attention weights over instances, `[b, instances]`.
pub fn attention_weights<E: Element>(
    spec: &ModelSpec,
    params: &ModelParams,
    images: &Tensor<E>,
) -> Result<Tensor<E>, ModelError> {
    let mut tape = Tape::<E>::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let (_, attn) = encode_and_attend(spec, &mut tape, &bound, x, &ForwardOptions::default())?;
    Ok(tape.value(attn).clone())
}
