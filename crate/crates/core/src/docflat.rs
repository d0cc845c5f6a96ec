//! Flat-batch attention with neural context gates, and the pooled
//! attention-between-datapoints block.
//!
//! Both blocks act on embedded pseudo-documents `[n, width, e]`. Only the
//! current-sentence positions take part in the cross-instance attention;
//! context positions pass through to the final layer norm.

use crate::attention::{
    build_flat_mask, linear, mha_param_shapes, multi_head_self_attention, AttentionScale,
    MhaWeights, Side,
};
use crate::data::{FlattenMap, SideLayout};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// `g = sigmoid(psi(h))`.
    Continuous,
    /// `g = 1[sigmoid(psi(h)) >= gamma]`, straight-through in the backward pass.
    Discrete,
    /// No gate: the attention output is added to the input.
    Identity,
}

/// Overrides for the gate value, used by tests and gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub enum GateControl<T> {
    Learned,
    /// Constant gate at every current position.
    Forced(f64),
    /// `g = sigmoid(psi(h)) + offset` with a constant `offset` of shape `[1, n*d, 1]`.
    Offset(Tensor<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbaConfig {
    pub heads: usize,
    pub mode: GateMode,
    pub gamma: f64,
    pub scale: AttentionScale,
    /// Apply the final layer norm at context positions too.
    pub normalize_context: bool,
    /// Block attention between current sentences of different documents.
    pub doc_boundary_mask: bool,
}

impl FbaConfig {
    pub fn new(heads: usize, mode: GateMode) -> Self {
        FbaConfig {
            heads,
            mode,
            gamma: DEFAULT_GAMMA,
            scale: AttentionScale::PerHead,
            normalize_context: true,
            doc_boundary_mask: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gate threshold {} outside (0, 1)",
                self.gamma
            )));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be at least 1".into()));
        }
        Ok(())
    }
}

/// Tape handles of one flat-batch attention block.
#[derive(Debug, Clone, Copy)]
pub struct FbaWeights {
    pub attn: MhaWeights,
    /// `[e, 1]`.
    pub psi_w: Var,
    /// `[1]`.
    pub psi_b: Var,
    pub ln_g: Var,
    pub ln_b: Var,
}

impl FbaWeights {
    pub fn bind(prefix: &str, get: &mut impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        Ok(FbaWeights {
            attn: MhaWeights::bind(&format!("{prefix}.attn"), get)?,
            psi_w: get(&format!("{prefix}.psi.w"))?,
            psi_b: get(&format!("{prefix}.psi.b"))?,
            ln_g: get(&format!("{prefix}.ln.g"))?,
            ln_b: get(&format!("{prefix}.ln.b"))?,
        })
    }
}

/// Parameter names and shapes of a flat-batch attention block under `prefix`.
pub fn fba_param_shapes(prefix: &str, e: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = mha_param_shapes(&format!("{prefix}.attn"), e);
    v.push((format!("{prefix}.psi.w"), vec![e, 1]));
    v.push((format!("{prefix}.psi.b"), vec![1]));
    v.push((format!("{prefix}.ln.g"), vec![e]));
    v.push((format!("{prefix}.ln.b"), vec![e]));
    v
}

/// Tape handles of a pooled attention-between-datapoints block.
#[derive(Debug, Clone, Copy)]
pub struct AbdWeights {
    pub attn: MhaWeights,
    pub ln_g: Var,
    pub ln_b: Var,
}

impl AbdWeights {
    pub fn bind(prefix: &str, get: &mut impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        Ok(AbdWeights {
            attn: MhaWeights::bind(&format!("{prefix}.attn"), get)?,
            ln_g: get(&format!("{prefix}.ln.g"))?,
            ln_b: get(&format!("{prefix}.ln.b"))?,
        })
    }
}

pub fn abd_param_shapes(prefix: &str, e: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = mha_param_shapes(&format!("{prefix}.attn"), e);
    v.push((format!("{prefix}.ln.g"), vec![e]));
    v.push((format!("{prefix}.ln.b"), vec![e]));
    v
}

#[derive(Debug, Clone, Copy)]
pub struct GateOutput {
    /// Gate at flattened positions, `[1, n*d, 1]`.
    pub g: Var,
    /// `sigmoid(psi(h))` before any binarization.
    pub sigma: Var,
    pub binarized: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FbaOutput {
    /// `[n, width, e]`.
    pub out: Var,
    pub gate: Option<GateOutput>,
    /// Per-head weights over the flattened sequence, `[1, heads, n*d, n*d]`.
    pub weights: Var,
}

fn hidden_dim<T: Scalar>(tape: &Tape<T>, x: Var, map: &FlattenMap) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 3 || s[0] != map.n || s[1] != map.width {
        return Err(Error::invalid(format!(
            "embedded batch {s:?} does not match plan [{}, {}, e]",
            map.n, map.width
        )));
    }
    Ok(s[2])
}

/// Gathers current-sentence rows of `h` `[n, width, e]` into `[1, n*d, e]`,
/// instance-major. Padding slots are zero.
pub fn flatten_current<T: Scalar>(tape: &mut Tape<T>, h: Var, map: &FlattenMap) -> Result<Var> {
    let e = hidden_dim(tape, h, map)?;
    tape.gather_rows(h, &map.gather, &[1, map.len(), e])
}

/// Inverse of [`flatten_current`]: places flattened rows back at their
/// batch positions, zero elsewhere.
pub fn scatter_current<T: Scalar>(tape: &mut Tape<T>, flat: Var, map: &FlattenMap) -> Result<Var> {
    let s = tape.shape(flat).to_vec();
    let rows: usize = s[..s.len().saturating_sub(1)].iter().product();
    if s.len() < 2 || rows != map.len() {
        return Err(Error::invalid(format!(
            "flattened tensor {s:?} does not match {} positions",
            map.len()
        )));
    }
    let e = s[s.len() - 1];
    tape.gather_rows(flat, &map.scatter, &[map.n, map.width, e])
}

fn gate_logits<T: Scalar>(tape: &mut Tape<T>, h_fba: Var, w: &FbaWeights) -> Result<Var> {
    let psi = linear(tape, h_fba, w.psi_w, w.psi_b)?;
    tape.sigmoid(psi)
}

pub fn ncg_continuous<T: Scalar>(
    tape: &mut Tape<T>,
    h_fba: Var,
    w: &FbaWeights,
) -> Result<GateOutput> {
    let sigma = gate_logits(tape, h_fba, w)?;
    Ok(GateOutput {
        g: sigma,
        sigma,
        binarized: false,
    })
}

/// Inclusive threshold: `sigmoid(psi) == gamma` opens the gate.
pub fn ncg_discrete<T: Scalar>(
    tape: &mut Tape<T>,
    h_fba: Var,
    w: &FbaWeights,
    gamma: f64,
) -> Result<GateOutput> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!(
            "gate threshold {gamma} outside (0, 1)"
        )));
    }
    let sigma = gate_logits(tape, h_fba, w)?;
    let g = tape.binarize_straight_through(sigma, T::lit(gamma))?;
    Ok(GateOutput {
        g,
        sigma,
        binarized: true,
    })
}

/// Constant `[n, width, 1]` indicator of current-segment positions.
fn current_indicator<T: Scalar>(map: &FlattenMap) -> Tensor<T> {
    Tensor::from_fn(&[map.n, map.width, 1], |r| {
        if map.scatter[r].is_some() {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Normalizes `x`; with `all == false` only current positions are replaced.
fn final_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    g: Var,
    b: Var,
    map: &FlattenMap,
    all: bool,
) -> Result<Var> {
    let ln = tape.layer_norm(x, g, b, LN_EPS)?;
    if all {
        return Ok(ln);
    }
    let m = tape.constant(current_indicator(map));
    let diff = tape.sub(ln, x)?;
    let masked = tape.mul(diff, m)?;
    tape.add(x, masked)
}

/// Flat-batch attention over the current sentences of a batch, gated and
/// merged back into the embedded pseudo-documents `e_pseudo` `[n, width, e]`.
///
/// Current positions become `(1-g) h + g h_fba`, context positions are left
/// as they are, and the result is layer-normalized.
#[allow(clippy::too_many_arguments)]
pub fn fba_forward<T: Scalar>(
    tape: &mut Tape<T>,
    e_pseudo: Var,
    layout: &SideLayout,
    side: Side,
    w: &FbaWeights,
    cfg: &FbaConfig,
    control: &GateControl<T>,
    doc_ids: Option<&[usize]>,
) -> Result<FbaOutput> {
    cfg.validate()?;
    let map = &layout.flatten;
    let h = flatten_current(tape, e_pseudo, map)?;
    let ids = if cfg.doc_boundary_mask { doc_ids } else { None };
    let mask = build_flat_mask::<T>(map, side, ids);
    let (h_fba, weights) =
        multi_head_self_attention(tape, h, Some(&mask.values), &w.attn, cfg.heads, cfg.scale)?;

    let (delta, gate) = if cfg.mode == GateMode::Identity {
        (h_fba, None)
    } else {
        let gate = match control {
            GateControl::Learned if cfg.mode == GateMode::Discrete => {
                ncg_discrete(tape, h_fba, w, cfg.gamma)?
            }
            GateControl::Learned => ncg_continuous(tape, h_fba, w)?,
            GateControl::Forced(v) => {
                let sigma = gate_logits(tape, h_fba, w)?;
                let g = tape.constant(Tensor::full(&[1, map.len(), 1], T::lit(*v)));
                GateOutput {
                    g,
                    sigma,
                    binarized: cfg.mode == GateMode::Discrete,
                }
            }
            GateControl::Offset(off) => {
                let sigma = gate_logits(tape, h_fba, w)?;
                let c = tape.constant(off.clone());
                let g = tape.add(sigma, c)?;
                GateOutput {
                    g,
                    sigma,
                    binarized: cfg.mode == GateMode::Discrete,
                }
            }
        };
        let diff = tape.sub(h_fba, h)?;
        (tape.mul(diff, gate.g)?, Some(gate))
    };
    let placed = scatter_current(tape, delta, map)?;
    let merged = tape.add(e_pseudo, placed)?;
    let out = final_norm(tape, merged, w.ln_g, w.ln_b, map, cfg.normalize_context)?;
    Ok(FbaOutput { out, gate, weights })
}

/// Pooled attention between datapoints: each instance's current sentence is
/// mean-pooled, the `n` pooled vectors attend to one another, and each result
/// is added to every current position of its instance before the layer norm.
pub fn abd_forward<T: Scalar>(
    tape: &mut Tape<T>,
    e_pseudo: Var,
    layout: &SideLayout,
    w: &AbdWeights,
    heads: usize,
    scale: AttentionScale,
) -> Result<Var> {
    let map = &layout.flatten;
    let e = hidden_dim(tape, e_pseudo, map)?;
    let (n, width) = (map.n, map.width);
    let pool = Tensor::from_fn(&[1, n, n * width], |k| {
        let (i, r) = (k / (n * width), k % (n * width));
        let len = layout.current[i].1;
        if r / width == i && map.scatter[r].is_some() && len > 0 {
            T::one() / T::lit(len as f64)
        } else {
            T::zero()
        }
    });
    let pool = tape.constant(pool);
    let rows = tape.reshape(e_pseudo, &[1, n * width, e])?;
    let pooled = tape.matmul(pool, rows)?;
    let (mixed, _) = multi_head_self_attention(tape, pooled, None, &w.attn, heads, scale)?;
    let repeat: Vec<Option<usize>> = (0..n * width)
        .map(|r| map.scatter[r].map(|_| r / width))
        .collect();
    let spread = tape.gather_rows(mixed, &repeat, &[n, width, e])?;
    let merged = tape.add(e_pseudo, spread)?;
    tape.layer_norm(merged, w.ln_g, w.ln_b, LN_EPS)
}
