use crate::autodiff::{Element, Tape, Var, LAYER_NORM_EPS};

use super::{BoundParams, ModelError, ModelSpec};

/// `[b, h, w, c]` images to `[b, tokens, p·p·c]` patch vectors, optionally
/// reordered by `order`.
pub(crate) fn patchify<E: Element>(
    spec: &ModelSpec,
    tape: &mut Tape<E>,
    images: Var,
    order: Option<&[usize]>,
) -> Result<Var, ModelError> {
    let shape = tape.shape(images).to_vec();
    let input = spec.input;
    let p = spec.patch_size;
    if shape.len() != 4
        || shape[1] != input.height
        || shape[2] != input.width
        || shape[3] != input.channels
        || !shape[1].is_multiple_of(p)
        || !shape[2].is_multiple_of(p)
    {
        return Err(ModelError::ImageShape {
            found: shape,
            height: input.height,
            width: input.width,
            channels: input.channels,
            patch: p,
        });
    }
    let (b, (rows, cols)) = (shape[0], spec.grid());
    let x = tape.reshape(images, &[b, rows, p, cols, p, input.channels])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = tape.reshape(x, &[b, rows * cols, spec.patch_dim()])?;
    match order {
        Some(order) => Ok(tape.index_select(x, 1, order)?),
        None => Ok(x),
    }
}

pub(crate) fn linear<E: Element>(
    tape: &mut Tape<E>,
    params: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var, ModelError> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    Ok(tape.linear(x, w, Some(b))?)
}

pub(crate) fn layer_norm<E: Element>(
    tape: &mut Tape<E>,
    params: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var, ModelError> {
    let g = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    Ok(tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
}

/// Multi-head self-attention over `[b, t, d_in]`, producing `[b, t, d_out]`.
fn self_attention<E: Element>(
    tape: &mut Tape<E>,
    params: &BoundParams,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var, ModelError> {
    let q = linear(tape, params, &format!("{prefix}.q_proj"), x)?;
    let k = linear(tape, params, &format!("{prefix}.k_proj"), x)?;
    let v = linear(tape, params, &format!("{prefix}.v_proj"), x)?;
    let shape = tape.shape(q).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let split = |tape: &mut Tape<E>, y: Var| -> Result<Var, ModelError> {
        let y = tape.reshape(y, &[b, t, heads, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        Ok(tape.reshape(y, &[b * heads, t, dh])?)
    };
    let q = split(tape, q)?;
    let k = split(tape, k)?;
    let v = split(tape, v)?;
    let q = tape.scale(q, 1.0 / (dh as f64).sqrt());
    let scores = tape.bmm(q, k, true)?;
    let attn = tape.softmax(scores, 2)?;
    let o = tape.bmm(attn, v, false)?;
    let o = tape.reshape(o, &[b, heads, t, dh])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[b, t, d])?;
    linear(tape, params, &format!("{prefix}.out_proj"), o)
}

/// Pre-norm transformer block.
///
/// When the block changes width, the residual branch goes through the
/// bias-free `residual_proj`; otherwise it is the identity.
pub(crate) fn transformer_block<E: Element>(
    tape: &mut Tape<E>,
    params: &BoundParams,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var, ModelError> {
    let h = layer_norm(tape, params, &format!("{prefix}.norm1"), x)?;
    let a = self_attention(tape, params, &format!("{prefix}.attn"), h, heads)?;
    let residual = if tape.shape(a) == tape.shape(x) {
        x
    } else {
        let w = params.get(&format!("{prefix}.residual_proj.weight"))?;
        tape.linear(x, w, None)?
    };
    let x = tape.add(residual, a)?;
    let h = layer_norm(tape, params, &format!("{prefix}.norm2"), x)?;
    let h = linear(tape, params, &format!("{prefix}.mlp.fc1"), h)?;
    let h = tape.gelu(h);
    let h = linear(tape, params, &format!("{prefix}.mlp.fc2"), h)?;
    Ok(tape.add(x, h)?)
}

/// Prepends the learned class token to `[b, t, d]` tokens.
pub(crate) fn prepend_class_token<E: Element>(
    tape: &mut Tape<E>,
    params: &BoundParams,
    tokens: Var,
) -> Result<Var, ModelError> {
    let shape = tape.shape(tokens).to_vec();
    let cls = params.get("cls_token")?;
    let cls = tape.reshape(cls, &[1, shape[2]])?;
    let cls = tape.repeat(cls, shape[0])?;
    Ok(tape.concat(&[cls, tokens], 1)?)
}

/// Representation of token 0 of `[b, t, d]`, as `[b, d]`.
pub(crate) fn first_token<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var, ModelError> {
    let shape = tape.shape(x).to_vec();
    let cls = tape.slice(x, 1, 0, 1)?;
    Ok(tape.reshape(cls, &[shape[0], shape[2]])?)
}
