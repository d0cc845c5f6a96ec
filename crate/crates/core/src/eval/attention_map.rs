use std::ops::Range;

use crate::attention::Side;
use crate::data::BatchPlan;
use crate::error::{Error, Result};
use crate::model::{self_attention_maps, ModelConfig, ModelParams};
use crate::scalar::Scalar;

/// Sentence-level attention: `scores[i][j]` is the mean token weight from
/// sentence `i` queries to sentence `j` keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub scores: Vec<Vec<f64>>,
    pub boundaries: Vec<Range<usize>>,
}

impl AttentionMatrix {
    /// Whitespace-separated rows, one per query sentence.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.scores {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Patch means of the `len x len` row-major token weights. `boundaries`
/// must tile `0..len` in order.
pub fn aggregate_attention(
    weights: &[f64],
    len: usize,
    boundaries: &[Range<usize>],
) -> Result<AttentionMatrix> {
    if weights.len() != len * len {
        return Err(Error::shape(
            "aggregate_attention",
            &[weights.len()],
            &[len, len],
        ));
    }
    let mut at = 0;
    for b in boundaries {
        if b.start != at || b.end <= b.start {
            return Err(Error::invalid(format!(
                "sentence boundary {b:?} does not continue at {at}"
            )));
        }
        at = b.end;
    }
    if at != len {
        return Err(Error::invalid(format!(
            "sentence boundaries cover {at} of {len} tokens"
        )));
    }
    let scores = boundaries
        .iter()
        .map(|bi| {
            boundaries
                .iter()
                .map(|bj| {
                    let sum: f64 = bi
                        .clone()
                        .flat_map(|q| bj.clone().map(move |k| weights[q * len + k]))
                        .sum();
                    sum / (bi.len() * bj.len()) as f64
                })
                .collect()
        })
        .collect();
    Ok(AttentionMatrix {
        scores,
        boundaries: boundaries.to_vec(),
    })
}

/// Sentence-level map of instance `i` of `plan`: self-attention of `layer`,
/// averaged over heads, restricted to the real tokens of the pseudo-document.
pub fn document_attention_map<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    plan: &BatchPlan,
    i: usize,
    side: Side,
    layer: usize,
) -> Result<AttentionMatrix> {
    let maps = self_attention_maps(cfg, params, plan, side)?;
    let w = maps.get(layer).ok_or_else(|| {
        Error::invalid(format!(
            "layer {layer} out of range ({} layers)",
            maps.len()
        ))
    })?;
    let (heads, width) = (w.shape()[1], w.shape()[2]);
    let pd = plan
        .docs
        .get(i)
        .ok_or_else(|| Error::invalid(format!("instance {i} out of range")))?;
    let (starts, len) = match side {
        Side::Encoder => (&pd.source_starts, pd.source.len()),
        Side::Decoder => (&pd.target_starts, pd.target_in.len()),
    };
    let mut avg = vec![0.0; len * len];
    for h in 0..heads {
        for q in 0..len {
            for k in 0..len {
                avg[q * len + k] +=
                    w.data()[((i * heads + h) * width + q) * width + k].as_f64() / heads as f64;
            }
        }
    }
    let bounds: Vec<Range<usize>> = starts
        .iter()
        .enumerate()
        .map(|(s, &a)| a..starts.get(s + 1).copied().unwrap_or(len))
        .collect();
    aggregate_attention(&avg, len, &bounds)
}
