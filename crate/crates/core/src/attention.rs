//! Scaled dot-product attention, multi-head attention, and mask builders.
//!
//! Masks are additive: `0` where attention is allowed and [`MASK_VALUE`]
//! where it is blocked.

use crate::data::{FlattenMap, SideLayout};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var, MASK_VALUE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Padding,
    Causal,
    FlatCausal,
    /// Flattened encoder-side variant: padding only.
    FlatPadding,
    Cross,
    Combined,
}

/// How scores are scaled before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionScale {
    /// `1/sqrt(e/k)`.
    #[default]
    PerHead,
    /// `1/sqrt(e)`.
    Model,
}

impl AttentionScale {
    pub fn factor(self, e: usize, heads: usize) -> f64 {
        match self {
            AttentionScale::PerHead => 1.0 / ((e / heads) as f64).sqrt(),
            AttentionScale::Model => 1.0 / (e as f64).sqrt(),
        }
    }
}

/// Additive mask of shape `[q, s]` or `[n, q, s]` (`q` may be 1 and broadcast).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask<T> {
    pub kind: MaskKind,
    pub values: Tensor<T>,
}

impl<T: Scalar> AttentionMask<T> {
    fn from_allowed(kind: MaskKind, shape: &[usize], allowed: impl Fn(usize) -> bool) -> Self {
        let blocked = T::lit(MASK_VALUE);
        AttentionMask {
            kind,
            values: Tensor::from_fn(shape, |i| if allowed(i) { T::zero() } else { blocked }),
        }
    }

    /// Elementwise minimum of two additive masks (both must be broadcastable).
    pub fn combine(&self, other: &Self) -> Result<Self> {
        Ok(AttentionMask {
            kind: MaskKind::Combined,
            values: self.values.min_with(&other.values)?,
        })
    }

    /// Whether entry `idx` (in the mask's own shape) is open.
    pub fn allowed(&self, idx: &[usize]) -> bool {
        self.values.at(idx) == T::zero()
    }

    /// View suited to `[n, heads, q, s]` scores.
    pub fn for_heads(&self) -> Tensor<T> {
        let s = self.values.shape();
        if s.len() == 3 {
            self.values
                .reshape(&[s[0], 1, s[1], s[2]])
                .expect("same numel")
        } else {
            self.values.clone()
        }
    }
}

/// `[len, len]`: row `i` may see columns `j <= i`.
pub fn build_causal_mask<T: Scalar>(len: usize) -> Result<AttentionMask<T>> {
    if len == 0 {
        return Err(Error::invalid("causal mask of length 0"));
    }
    Ok(AttentionMask::from_allowed(
        MaskKind::Causal,
        &[len, len],
        |k| k % len <= k / len,
    ))
}

/// `[n, 1, padded_len]`: key columns at or past each instance's length are blocked.
pub fn build_padding_mask<T: Scalar>(
    lengths: &[usize],
    padded_len: usize,
) -> Result<AttentionMask<T>> {
    if padded_len == 0 {
        return Err(Error::invalid("padding mask of length 0"));
    }
    Ok(AttentionMask::from_allowed(
        MaskKind::Padding,
        &[lengths.len(), 1, padded_len],
        |k| k % padded_len < lengths[k / padded_len],
    ))
}

/// Key-padding mask for decoder queries attending to encoder states.
pub fn build_cross_mask<T: Scalar>(
    src_lengths: &[usize],
    padded_len: usize,
) -> Result<AttentionMask<T>> {
    let mut m = build_padding_mask(src_lengths, padded_len)?;
    m.kind = MaskKind::Cross;
    Ok(m)
}

/// Which stack a flat-batch mask is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// `[n*d, n*d]` mask over the flattened current sentences of a batch.
///
/// Padding keys are always blocked. On the decoder side position `p` only
/// sees `q <= p`. With `doc_ids`, keys from other documents are blocked too.
pub fn build_flat_mask<T: Scalar>(
    map: &FlattenMap,
    side: Side,
    doc_ids: Option<&[usize]>,
) -> AttentionMask<T> {
    let n = map.len();
    let d = map.d.max(1);
    let kind = match side {
        Side::Encoder => MaskKind::FlatPadding,
        Side::Decoder => MaskKind::FlatCausal,
    };
    AttentionMask::from_allowed(kind, &[n, n], |k| {
        let (p, q) = (k / n, k % n);
        let causal = side == Side::Encoder || q <= p;
        let same_doc = doc_ids.is_none_or(|ids| ids[p / d] == ids[q / d]);
        causal && same_doc && map.is_real(q)
    })
}

/// Flat-causal mask for a batch side, as used by decoder-side flat-batch attention.
pub fn build_flat_causal_mask<T: Scalar>(side: &SideLayout) -> AttentionMask<T> {
    build_flat_mask(&side.flatten, Side::Decoder, None)
}

/// `softmax(Q K^T * scale + mask) V` over the last two axes.
/// Returns the output and the attention weights.
pub fn scaled_dot_product_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<T>>,
    scale: f64,
) -> Result<(Var, Var)> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.last() != ks.last() {
        return Err(Error::shape("attention (Q vs K head dim)", &qs, &ks));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::lit(scale))?;
    let axis = tape.shape(scores).len() - 1;
    let weights = tape.softmax(scores, axis, mask)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// `x W + b`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

/// Projection weights of one multi-head attention block. All projections
/// are `[e, e]` with `[e]` biases; head `j` owns columns `j*e/k .. (j+1)*e/k`.
#[derive(Debug, Clone, Copy)]
pub struct MhaWeights {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl MhaWeights {
    /// Looks up the handles named by [`mha_param_shapes`] under `prefix`.
    pub fn bind(prefix: &str, get: &mut impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        Ok(MhaWeights {
            w_q: get(&format!("{prefix}.w_q"))?,
            b_q: get(&format!("{prefix}.b_q"))?,
            w_k: get(&format!("{prefix}.w_k"))?,
            b_k: get(&format!("{prefix}.b_k"))?,
            w_v: get(&format!("{prefix}.w_v"))?,
            b_v: get(&format!("{prefix}.b_v"))?,
            w_o: get(&format!("{prefix}.w_o"))?,
            b_o: get(&format!("{prefix}.b_o"))?,
        })
    }
}

/// Parameter names and shapes of a multi-head block under `prefix`.
pub fn mha_param_shapes(prefix: &str, e: usize) -> Vec<(String, Vec<usize>)> {
    ["q", "k", "v", "o"]
        .iter()
        .flat_map(|p| {
            [
                (format!("{prefix}.w_{p}"), vec![e, e]),
                (format!("{prefix}.b_{p}"), vec![e]),
            ]
        })
        .collect()
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n, len, e) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[n, len, heads, e / heads])?;
    tape.permute(x, &[0, 2, 1, 3])
}

/// Multi-head attention of `query_in` `[n, q, e]` over `kv_in` `[n, s, e]`.
/// `mask` must broadcast to `[n, heads, q, s]`. Returns the projected output
/// `[n, q, e]` and the per-head weights `[n, heads, q, s]`.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    query_in: Var,
    kv_in: Var,
    mask: Option<&Tensor<T>>,
    w: &MhaWeights,
    heads: usize,
    scale: AttentionScale,
) -> Result<(Var, Var)> {
    let qs = tape.shape(query_in).to_vec();
    if qs.len() != 3 {
        return Err(Error::invalid(format!(
            "attention input must be [n, len, e], got {qs:?}"
        )));
    }
    let e = qs[2];
    if heads == 0 || !e.is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "hidden size {e} is not divisible by {heads} heads"
        )));
    }
    let q = linear(tape, query_in, w.w_q, w.b_q)?;
    let k = linear(tape, kv_in, w.w_k, w.b_k)?;
    let v = linear(tape, kv_in, w.w_v, w.b_v)?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let (ctx, weights) = scaled_dot_product_attention(tape, q, k, v, mask, scale.factor(e, heads))?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &qs)?;
    let out = linear(tape, ctx, w.w_o, w.b_o)?;
    Ok((out, weights))
}

pub fn multi_head_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    mask: Option<&Tensor<T>>,
    w: &MhaWeights,
    heads: usize,
    scale: AttentionScale,
) -> Result<(Var, Var)> {
    multi_head_attention(tape, h, h, mask, w, heads, scale)
}

#[cfg(test)]
mod tests;
