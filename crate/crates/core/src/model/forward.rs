use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    build_causal_mask, build_cross_mask, build_padding_mask, multi_head_attention, AttentionMask,
    MhaWeights, Side,
};
use crate::data::{BatchPlan, SideLayout};
use crate::docflat::{
    abd_forward, fba_forward, AbdWeights, FbaConfig, FbaOutput, FbaWeights, GateControl, LN_EPS,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::config::{LossScope, ModelConfig, Variant};
use super::params::ModelParams;

/// Parameters registered on a tape, by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers every tensor of `params`; as trainable leaves when `trainable`.
    pub fn new<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn mha(&self, prefix: &str) -> Result<MhaWeights> {
        MhaWeights::bind(prefix, &mut |n| self.get(n))
    }

    fn ln(&self, prefix: &str) -> Result<(Var, Var)> {
        Ok((
            self.get(&format!("{prefix}.g"))?,
            self.get(&format!("{prefix}.b"))?,
        ))
    }
}

/// Per-call switches: training mode, dropout randomness, and gate overrides.
#[derive(Debug, Clone)]
pub struct RunOptions<T> {
    pub training: bool,
    pub rng: ChaCha8Rng,
    pub enc_gate: GateControl<T>,
    pub dec_gate: GateControl<T>,
    /// When set, self-attention weights of every layer are recorded here.
    pub capture: Option<Vec<(Side, Var)>>,
}

impl<T> RunOptions<T> {
    pub fn eval() -> Self {
        RunOptions {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            enc_gate: GateControl::Learned,
            dec_gate: GateControl::Learned,
            capture: None,
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        RunOptions {
            training: true,
            ..RunOptions::eval()
        }
        .with_rng(rng)
    }

    fn with_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = rng;
        self
    }

    /// Forces both gates to the constant `g`.
    pub fn forced_gates(mut self, g: f64) -> Self {
        self.enc_gate = GateControl::Forced(g);
        self.dec_gate = GateControl::Forced(g);
        self
    }
}

/// Sinusoidal position table `[len, e]`.
pub fn positional_encoding<T: Scalar>(len: usize, e: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, e], |k| {
        let (pos, i) = ((k / e) as f64, k % e);
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / e as f64);
        T::lit(if i % 2 == 0 {
            (pos * rate).sin()
        } else {
            (pos * rate).cos()
        })
    })
}

fn fba_config(cfg: &ModelConfig) -> Option<FbaConfig> {
    cfg.variant.gate_mode().map(|mode| FbaConfig {
        gamma: cfg.gamma,
        scale: cfg.attention_scale,
        normalize_context: cfg.normalize_context,
        doc_boundary_mask: cfg.doc_boundary_mask,
        ..FbaConfig::new(cfg.heads, mode)
    })
}

/// Scaled token embeddings plus positions, `[n, width, e]`.
fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    table: Var,
    layout: &SideLayout,
    e: usize,
    vocab: usize,
) -> Result<Var> {
    if let Some(&bad) = layout.tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::data(format!(
            "token id {bad} outside vocabulary of {vocab}"
        )));
    }
    let n = layout.lengths.len();
    let x = tape.embedding(table, &layout.tokens, &[n, layout.width])?;
    let x = tape.scale(x, T::lit((e as f64).sqrt()))?;
    let pe = tape.constant(positional_encoding(layout.width, e));
    tape.add(x, pe)
}

fn residual_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    sub: Var,
    ln: (Var, Var),
    run: &mut RunOptions<T>,
    p: f64,
) -> Result<Var> {
    let sub = tape.dropout(sub, p, run.training, &mut run.rng)?;
    let sum = tape.add(x, sub)?;
    tape.layer_norm(sum, ln.0, ln.1, LN_EPS)
}

fn ffn<T: Scalar>(tape: &mut Tape<T>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, b.get(&format!("{prefix}.w1"))?)?;
    let h = tape.add(h, b.get(&format!("{prefix}.b1"))?)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, b.get(&format!("{prefix}.w2"))?)?;
    tape.add(h, b.get(&format!("{prefix}.b2"))?)
}

/// Output of the embedding-level block of one side.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub x: Var,
    pub fba: Option<FbaOutput>,
}

/// Embedding followed by the variant's batch-context block.
pub fn embed_block<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    layout: &SideLayout,
    side: Side,
    doc_ids: &[usize],
    run: &mut RunOptions<T>,
) -> Result<BlockOutput> {
    let (table, prefix) = match side {
        Side::Encoder => ("src_embed", "enc"),
        Side::Decoder => ("tgt_embed", "dec"),
    };
    let x = embed(tape, b.get(table)?, layout, cfg.d_model, cfg.vocab_size)?;
    let x = tape.dropout(x, cfg.dropout, run.training, &mut run.rng)?;
    if let Some(fcfg) = fba_config(cfg) {
        let w = FbaWeights::bind(&format!("{prefix}.fba"), &mut |n| b.get(n))?;
        let control = match side {
            Side::Encoder => &run.enc_gate,
            Side::Decoder => &run.dec_gate,
        };
        let out = fba_forward(tape, x, layout, side, &w, &fcfg, control, Some(doc_ids))?;
        return Ok(BlockOutput {
            x: out.out,
            fba: Some(out),
        });
    }
    let abd_here = cfg.variant == Variant::Abd && (side == Side::Encoder || cfg.abd_decoder);
    if abd_here {
        let w = AbdWeights::bind(&format!("{prefix}.abd"), &mut |n| b.get(n))?;
        let x = abd_forward(tape, x, layout, &w, cfg.heads, cfg.attention_scale)?;
        return Ok(BlockOutput { x, fba: None });
    }
    Ok(BlockOutput { x, fba: None })
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[n, width, e]`.
    pub states: Var,
    pub lengths: Vec<usize>,
    pub fba: Option<FbaOutput>,
}

pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    plan: &BatchPlan,
    run: &mut RunOptions<T>,
) -> Result<EncoderOutput> {
    let layout = &plan.source;
    let block = embed_block(tape, cfg, b, layout, Side::Encoder, &plan.doc_ids(), run)?;
    let mask = build_padding_mask::<T>(&layout.lengths, layout.width)?.for_heads();
    let mut x = block.x;
    for l in 0..cfg.layers {
        let w = b.mha(&format!("enc.{l}.self"))?;
        let (a, weights) =
            multi_head_attention(tape, x, x, Some(&mask), &w, cfg.heads, cfg.attention_scale)?;
        if let Some(c) = run.capture.as_mut() {
            c.push((Side::Encoder, weights));
        }
        x = residual_block(tape, x, a, b.ln(&format!("enc.{l}.ln1"))?, run, cfg.dropout)?;
        let f = ffn(tape, b, &format!("enc.{l}.ffn"), x)?;
        x = residual_block(tape, x, f, b.ln(&format!("enc.{l}.ln2"))?, run, cfg.dropout)?;
    }
    Ok(EncoderOutput {
        states: x,
        lengths: layout.lengths.clone(),
        fba: block.fba,
    })
}

/// Decoder layers over already embedded (and context-mixed) inputs `x`
/// `[n, width, e]`. `enc_states` must have the same `n`.
pub fn decoder_stack<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    x: Var,
    tgt_lengths: &[usize],
    enc: (Var, &[usize]),
    run: &mut RunOptions<T>,
) -> Result<Var> {
    let width = tape.shape(x)[1];
    let src_width = tape.shape(enc.0)[1];
    let self_mask =
        build_causal_mask::<T>(width)?.combine(&build_padding_mask(tgt_lengths, width)?)?;
    let self_mask = self_mask.for_heads();
    let cross: AttentionMask<T> = build_cross_mask(enc.1, src_width)?;
    let cross = cross.for_heads();
    let mut x = x;
    for l in 0..cfg.layers {
        let w = b.mha(&format!("dec.{l}.self"))?;
        let (a, weights) = multi_head_attention(
            tape,
            x,
            x,
            Some(&self_mask),
            &w,
            cfg.heads,
            cfg.attention_scale,
        )?;
        if let Some(c) = run.capture.as_mut() {
            c.push((Side::Decoder, weights));
        }
        x = residual_block(tape, x, a, b.ln(&format!("dec.{l}.ln1"))?, run, cfg.dropout)?;
        let w = b.mha(&format!("dec.{l}.cross"))?;
        let (c, _) = multi_head_attention(
            tape,
            x,
            enc.0,
            Some(&cross),
            &w,
            cfg.heads,
            cfg.attention_scale,
        )?;
        x = residual_block(tape, x, c, b.ln(&format!("dec.{l}.ln2"))?, run, cfg.dropout)?;
        let f = ffn(tape, b, &format!("dec.{l}.ffn"), x)?;
        x = residual_block(tape, x, f, b.ln(&format!("dec.{l}.ln3"))?, run, cfg.dropout)?;
    }
    Ok(x)
}

/// Vocabulary logits through the target embedding: `h E^T + b`.
pub fn project<T: Scalar>(tape: &mut Tape<T>, b: &Bound, hidden: Var) -> Result<Var> {
    let et = tape.transpose(b.get("tgt_embed")?)?;
    let l = tape.matmul(hidden, et)?;
    tape.add(l, b.get("out.b")?)
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Final decoder states `[n, width, e]`.
    pub hidden: Var,
    pub fba: Option<FbaOutput>,
}

/// Teacher-forced decoder pass over `plan.target`.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    plan: &BatchPlan,
    enc: &EncoderOutput,
    run: &mut RunOptions<T>,
) -> Result<DecoderOutput> {
    let block = embed_block(
        tape,
        cfg,
        b,
        &plan.target,
        Side::Decoder,
        &plan.doc_ids(),
        run,
    )?;
    let hidden = decoder_stack(
        tape,
        cfg,
        b,
        block.x,
        &plan.target.lengths,
        (enc.states, &enc.lengths),
        run,
    )?;
    Ok(DecoderOutput {
        hidden,
        fba: block.fba,
    })
}

/// Counted output targets of `plan` under `scope`, one per target row.
pub fn loss_targets(plan: &BatchPlan, scope: LossScope) -> Vec<Option<usize>> {
    match scope {
        LossScope::CurrentOnly => plan.current_targets(),
        LossScope::FullPseudoDoc => plan.target_out.clone(),
    }
}

/// Label-smoothed cross-entropy of the counted rows of `hidden`. Only those
/// rows are projected onto the vocabulary.
pub fn loss_from_hidden<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    hidden: Var,
    targets: &[Option<usize>],
    label_smoothing: f64,
) -> Result<Var> {
    let rows: Vec<Option<usize>> = targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_some())
        .map(|(r, _)| Some(r))
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid("loss with zero counted tokens"));
    }
    let e = *tape.shape(hidden).last().unwrap();
    let picked = tape.gather_rows(hidden, &rows, &[rows.len(), e])?;
    let logits = project(tape, b, picked)?;
    let t: Vec<Option<usize>> = targets.iter().copied().filter(Option::is_some).collect();
    tape.cross_entropy(logits, &t, label_smoothing)
}

/// Logits-level loss: `logits` `[n, width, V]` against the counted targets.
pub fn loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    plan: &BatchPlan,
    cfg: &ModelConfig,
) -> Result<Var> {
    tape.cross_entropy(
        logits,
        &loss_targets(plan, cfg.loss_scope),
        cfg.label_smoothing,
    )
}

/// Full teacher-forced forward pass, returning the scalar training loss.
pub fn forward_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    plan: &BatchPlan,
    run: &mut RunOptions<T>,
) -> Result<Var> {
    let enc = encode(tape, cfg, b, plan, run)?;
    let dec = decode(tape, cfg, b, plan, &enc, run)?;
    loss_from_hidden(
        tape,
        b,
        dec.hidden,
        &loss_targets(plan, cfg.loss_scope),
        cfg.label_smoothing,
    )
}

/// Loss value and gradients of every parameter for one batch.
pub fn loss_and_grads<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    plan: &BatchPlan,
    run: &mut RunOptions<T>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params, true);
    let l = forward_loss(&mut tape, cfg, &b, plan, run)?;
    let value = tape.value(l).item().as_f64();
    let mut grads = tape.backward(l)?;
    let out = b
        .vars
        .iter()
        .map(|(k, v)| {
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(params.tensors[k].shape()));
            (k.clone(), g)
        })
        .collect();
    Ok((value, out))
}

/// Evaluation-mode loss of one batch.
pub fn eval_loss<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    plan: &BatchPlan,
) -> Result<f64> {
    let mut tape = Tape::inference();
    let b = Bound::new(&mut tape, params, false);
    let l = forward_loss(&mut tape, cfg, &b, plan, &mut RunOptions::eval())?;
    Ok(tape.value(l).item().as_f64())
}

/// Teacher-forced logits `[n, width, V]` in evaluation mode.
pub fn eval_logits<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    plan: &BatchPlan,
    run: &mut RunOptions<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let b = Bound::new(&mut tape, params, false);
    let enc = encode(&mut tape, cfg, &b, plan, run)?;
    let dec = decode(&mut tape, cfg, &b, plan, &enc, run)?;
    let logits = project(&mut tape, &b, dec.hidden)?;
    Ok(tape.value(logits).clone())
}

/// Teacher-forced self-attention weights of one side, one `[n, heads, w, w]`
/// tensor per layer.
pub fn self_attention_maps<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    plan: &BatchPlan,
    side: Side,
) -> Result<Vec<Tensor<T>>> {
    let mut run = RunOptions::eval();
    run.capture = Some(Vec::new());
    let mut tape = Tape::inference();
    let b = Bound::new(&mut tape, params, false);
    let enc = encode(&mut tape, cfg, &b, plan, &mut run)?;
    if side == Side::Decoder {
        decode(&mut tape, cfg, &b, plan, &enc, &mut run)?;
    }
    let captured = run.capture.take().unwrap_or_default();
    Ok(captured
        .into_iter()
        .filter(|(s, _)| *s == side)
        .map(|(_, v)| tape.value(v).clone())
        .collect())
}
