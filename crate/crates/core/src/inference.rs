//! Beam search, two-pass document decoding, and teacher-forced scoring.

use crate::attention::Side;
use crate::data::{
    make_pseudo_documents, plan_batches, BatchPlan, Document, PseudoDocument, TokenId, Vocab, EOS,
    PAD, UNK,
};
use crate::error::{Error, Result};
use crate::model::{
    decoder_stack, embed_block, encode, project, Bound, ModelConfig, ModelParams, RunOptions,
    Variant,
};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax, Tape, Tensor};

pub const DEFAULT_BEAM: usize = 5;
pub const DEFAULT_BATCH: usize = 16;
pub const LENGTH_ALPHA: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Hard cap on generated tokens per sentence, EOS included.
    pub max_len: usize,
    pub alpha: f64,
    /// Finish each instance before starting the next, so instances attending
    /// across the batch see complete earlier translations. Off means
    /// lockstep decoding.
    pub whole_sentences: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: DEFAULT_BEAM,
            max_len: 64,
            alpha: LENGTH_ALPHA,
            whole_sentences: false,
        }
    }
}

/// One hypothesis; `tokens` excludes the final EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Scored length: generated tokens, counting EOS once finished.
    pub fn length(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// `log_prob / length^alpha`.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / (self.length().max(1) as f64).powf(alpha)
    }
}

/// Next-token distributions for a set of partial translations.
pub trait StepScorer {
    /// Log-probabilities over the vocabulary after each `(instance, prefix)`
    /// query. `reps` holds the current best prefix of every instance.
    fn next_log_probs(
        &mut self,
        queries: &[(usize, &[TokenId])],
        reps: &[Vec<TokenId>],
    ) -> Result<Vec<Vec<f64>>>;

    /// Whether instances must be expanded one after another within a step.
    fn sequential(&self) -> bool;

    /// Tokens that may never be generated.
    fn banned(&self, _token: TokenId) -> bool {
        false
    }
}

fn sort_beam(beam: &mut [Hypothesis], alpha: f64) {
    beam.sort_by(|a, b| {
        b.score(alpha)
            .total_cmp(&a.score(alpha))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

fn expand(
    beam: &[Hypothesis],
    lps: &[Vec<f64>],
    cfg: &DecodeConfig,
    scorer: &dyn StepScorer,
) -> Vec<Hypothesis> {
    let mut pool: Vec<Hypothesis> = beam.iter().filter(|h| h.finished).cloned().collect();
    let active = beam.iter().filter(|h| !h.finished);
    for (h, lp) in active.zip(lps) {
        // Only EOS fits in the last slot.
        let last = h.tokens.len() + 1 >= cfg.max_len;
        let mut order: Vec<TokenId> = (0..lp.len())
            .filter(|&t| !scorer.banned(t) && (!last || t == EOS))
            .collect();
        order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
        for &t in order.iter().take(cfg.beam) {
            let mut next = h.clone();
            next.log_prob += lp[t];
            if t == EOS {
                next.finished = true;
            } else {
                next.tokens.push(t);
            }
            pool.push(next);
        }
    }
    sort_beam(&mut pool, cfg.alpha);
    pool.truncate(cfg.beam);
    pool
}

/// Advances every unfinished beam of `group` by one token. Returns false
/// when nothing was left to expand.
fn step(
    scorer: &mut dyn StepScorer,
    group: &[usize],
    beams: &mut [Vec<Hypothesis>],
    reps: &mut [Vec<TokenId>],
    cfg: &DecodeConfig,
) -> Result<bool> {
    let queries: Vec<(usize, &[TokenId])> = group
        .iter()
        .flat_map(|&i| {
            beams[i]
                .iter()
                .filter(|h| !h.finished)
                .map(move |h| (i, h.tokens.as_slice()))
        })
        .collect();
    if queries.is_empty() {
        return Ok(false);
    }
    let lps = scorer.next_log_probs(&queries, reps)?;
    let mut offset = 0;
    let mut updated = Vec::new();
    for &i in group {
        let k = beams[i].iter().filter(|h| !h.finished).count();
        let next = expand(&beams[i], &lps[offset..offset + k], cfg, &*scorer);
        offset += k;
        assert!(!next.is_empty(), "beam emptied");
        updated.push((i, next));
    }
    for (i, b) in updated {
        reps[i] = b[0].tokens.clone();
        beams[i] = b;
    }
    Ok(true)
}

/// Beam search for `n` instances, in lockstep unless `cfg.whole_sentences`. Returns the final
/// beams, best hypothesis first.
pub fn beam_search_core(
    scorer: &mut dyn StepScorer,
    n: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    if cfg.max_len < 1 || cfg.beam < 1 {
        return Err(Error::invalid("beam and max_len must be at least 1"));
    }
    let start = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    let mut beams: Vec<Vec<Hypothesis>> = vec![vec![start]; n];
    let mut reps: Vec<Vec<TokenId>> = vec![Vec::new(); n];
    let groups: Vec<Vec<usize>> = if scorer.sequential() {
        (0..n).map(|i| vec![i]).collect()
    } else {
        vec![(0..n).collect()]
    };
    let rounds: Vec<Vec<Vec<usize>>> = if cfg.whole_sentences && scorer.sequential() {
        groups.into_iter().map(|g| vec![g]).collect()
    } else {
        vec![groups]
    };
    for round in &rounds {
        for _ in 0..cfg.max_len {
            let mut active = false;
            for group in round {
                active |= step(scorer, group, &mut beams, &mut reps, cfg)?;
            }
            if !active {
                break;
            }
        }
    }
    Ok(beams)
}

/// Scores prefixes with a trained model over one batch plan. The plan's
/// target context segments are kept; the current segments are replaced by
/// the prefixes being decoded.
pub struct ModelScorer<'a, T> {
    cfg: &'a ModelConfig,
    params: &'a ModelParams<T>,
    plan: &'a BatchPlan,
    /// Encoder states per instance, `[width, e]` each, and source lengths.
    enc: Vec<Tensor<T>>,
    src_len: Vec<usize>,
    vocab_index: std::ops::Range<TokenId>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(
        cfg: &'a ModelConfig,
        params: &'a ModelParams<T>,
        plan: &'a BatchPlan,
        vocab: &Vocab,
    ) -> Result<Self> {
        let mut tape = Tape::inference();
        let b = Bound::new(&mut tape, params, false);
        let out = encode(&mut tape, cfg, &b, plan, &mut RunOptions::eval())?;
        let states = tape.value(out.states);
        let (w, e) = (states.shape()[1], states.shape()[2]);
        let enc = (0..plan.len())
            .map(|i| Tensor::new(&[w, e], states.data()[i * w * e..(i + 1) * w * e].to_vec()))
            .collect::<Result<_>>()?;
        let first = vocab.index_token(1);
        Ok(ModelScorer {
            cfg,
            params,
            plan,
            enc,
            src_len: out.lengths,
            vocab_index: first..first + vocab.n_index(),
        })
    }

    fn doc_with(&self, i: usize, prefix: &[TokenId]) -> PseudoDocument {
        self.plan.docs[i].with_current_target(prefix)
    }

    /// Block output of the last instance of `docs`, `[len, e]`.
    fn block_row(&self, docs: Vec<PseudoDocument>) -> Result<Tensor<T>> {
        let mini = BatchPlan::new(docs)?;
        let mut tape = Tape::inference();
        let b = Bound::new(&mut tape, self.params, false);
        let out = embed_block(
            &mut tape,
            self.cfg,
            &b,
            &mini.target,
            Side::Decoder,
            &mini.doc_ids(),
            &mut RunOptions::eval(),
        )?;
        let v = tape.value(out.x);
        let (n, w, e) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let len = mini.target.lengths[n - 1];
        Tensor::new(
            &[len, e],
            v.data()[(n - 1) * w * e..((n - 1) * w + len) * e].to_vec(),
        )
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn sequential(&self) -> bool {
        self.cfg.variant.has_fba() || (self.cfg.variant == Variant::Abd && self.cfg.abd_decoder)
    }

    fn banned(&self, token: TokenId) -> bool {
        token == PAD || self.vocab_index.contains(&token)
    }

    fn next_log_probs(
        &mut self,
        queries: &[(usize, &[TokenId])],
        reps: &[Vec<TokenId>],
    ) -> Result<Vec<Vec<f64>>> {
        let e = self.cfg.d_model;
        let mut rows = Vec::with_capacity(queries.len());
        for &(i, prefix) in queries {
            let docs = if self.sequential() {
                let mut d: Vec<PseudoDocument> =
                    (0..i).map(|j| self.doc_with(j, &reps[j])).collect();
                d.push(self.doc_with(i, prefix));
                d
            } else {
                vec![self.doc_with(i, prefix)]
            };
            rows.push(self.block_row(docs)?);
        }
        let width = rows.iter().map(|r| r.shape()[0]).max().unwrap_or(1);
        let src_w = self.enc[0].shape()[0];
        let h = rows.len();
        let mut x = vec![T::zero(); h * width * e];
        let mut enc = Vec::with_capacity(h * src_w * e);
        let mut tgt_len = Vec::with_capacity(h);
        let mut src_len = Vec::with_capacity(h);
        for (k, (r, &(i, _))) in rows.iter().zip(queries).enumerate() {
            x[k * width * e..k * width * e + r.numel()].copy_from_slice(r.data());
            enc.extend_from_slice(self.enc[i].data());
            tgt_len.push(r.shape()[0]);
            src_len.push(self.src_len[i]);
        }
        let mut tape = Tape::inference();
        let b = Bound::new(&mut tape, self.params, false);
        let xv = tape.constant(Tensor::new(&[h, width, e], x)?);
        let ev = tape.constant(Tensor::new(&[h, src_w, e], enc)?);
        let hidden = decoder_stack(
            &mut tape,
            self.cfg,
            &b,
            xv,
            &tgt_len,
            (ev, &src_len),
            &mut RunOptions::eval(),
        )?;
        let last: Vec<Option<usize>> = tgt_len
            .iter()
            .enumerate()
            .map(|(k, &l)| Some(k * width + l - 1))
            .collect();
        let picked = tape.gather_rows(hidden, &last, &[h, e])?;
        let logits = project(&mut tape, &b, picked)?;
        let lp = log_softmax(tape.value(logits));
        let v = lp.shape()[1];
        Ok(lp
            .data()
            .chunks(v)
            .map(|c| c.iter().map(|x| x.as_f64()).collect())
            .collect())
    }
}

/// Translations of the current sentences of `plan`, in instance order.
pub fn beam_search<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    plan: &BatchPlan,
    vocab: &Vocab,
    dcfg: &DecodeConfig,
) -> Result<Vec<Vec<TokenId>>> {
    let mut scorer = ModelScorer::new(cfg, params, plan, vocab)?;
    let beams = beam_search_core(&mut scorer, plan.len(), dcfg)?;
    Ok(beams.into_iter().map(|b| b[0].tokens.clone()).collect())
}

/// Stand-in for an empty translation used as target context.
fn non_empty(s: &[TokenId]) -> Vec<TokenId> {
    if s.is_empty() {
        vec![UNK]
    } else {
        s.to_vec()
    }
}

/// Decodes every sentence of `docs` (targets are ignored except as
/// placeholders) with context taken from `context` translations.
fn translate_with_context<T: Scalar>(
    docs: &[Document],
    context: &[Vec<Vec<TokenId>>],
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    vocab: &Vocab,
    dcfg: &DecodeConfig,
    batch: usize,
) -> Result<Vec<Vec<Vec<TokenId>>>> {
    let with_ctx: Vec<Document> = docs
        .iter()
        .zip(context)
        .map(|(d, c)| {
            Document::new(
                d.doc_id,
                d.source.clone(),
                c.iter().map(|s| non_empty(s)).collect(),
            )
        })
        .collect::<Result<_>>()?;
    let mut flat = Vec::new();
    for plan in plan_batches(&with_ctx, vocab, cfg.c_minus, batch, None)? {
        flat.extend(beam_search(cfg, params, &plan, vocab, dcfg)?);
    }
    let mut it = flat.into_iter();
    Ok(docs
        .iter()
        .map(|d| {
            (0..d.len())
                .map(|_| it.next().expect("one output per sentence"))
                .collect()
        })
        .collect())
}

/// Two-pass decoding. Pass 1 translates each sentence with the sentence
/// model; pass 2 translates again with the document model, using the pass-1
/// output as target context. Without a sentence model, pass 1 runs the
/// document model with no context.
pub fn iterative_decode<T: Scalar>(
    docs: &[Document],
    sent: Option<(&ModelConfig, &ModelParams<T>)>,
    doc: (&ModelConfig, &ModelParams<T>),
    vocab: &Vocab,
    dcfg: &DecodeConfig,
    batch: usize,
) -> Result<Vec<Vec<Vec<TokenId>>>> {
    for (c, p) in sent.into_iter().chain([doc]) {
        p.check_against(c)?;
        if c.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "model vocabulary {} does not match {} entries",
                c.vocab_size,
                vocab.len()
            )));
        }
    }
    let placeholders: Vec<Vec<Vec<TokenId>>> = docs.iter().map(|d| d.source.clone()).collect();
    let first = match sent {
        Some((c, p)) => translate_with_context(docs, &placeholders, c, p, vocab, dcfg, batch)?,
        None => {
            let c = ModelConfig {
                c_minus: 0,
                ..doc.0.clone()
            };
            translate_with_context(docs, &placeholders, &c, doc.1, vocab, dcfg, batch)?
        }
    };
    translate_with_context(docs, &first, doc.0, doc.1, vocab, dcfg, batch)
}

/// Sum of teacher-forced log-probabilities of the current target tokens of
/// instance `i` (EOS not included).
pub fn score_instance<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    plan: &BatchPlan,
    i: usize,
) -> Result<f64> {
    let pd = &plan.docs[i];
    let r = pd.current_target();
    if r.len() < 2 {
        return Err(Error::invalid("cannot score an empty current sentence"));
    }
    let logits = crate::model::eval_logits(cfg, params, plan, &mut RunOptions::eval())?;
    let (w, v) = (logits.shape()[1], logits.shape()[2]);
    let mut total = 0.0;
    for pos in r.start..r.end - 1 {
        let row = &logits.data()[(i * w + pos) * v..(i * w + pos + 1) * v];
        let lp = log_softmax(&Tensor::new(&[v], row.to_vec())?);
        total += lp.data()[pd.target_out[pos]].as_f64();
    }
    Ok(total)
}

/// Pseudo-documents of the last `batch` sentences of `doc`, current last.
pub fn trailing_plan(
    doc: &Document,
    cfg: &ModelConfig,
    vocab: &Vocab,
    batch: usize,
) -> Result<BatchPlan> {
    let pds = make_pseudo_documents(doc, cfg.c_minus, vocab)?;
    let from = pds.len().saturating_sub(batch.max(1));
    BatchPlan::new(pds[from..].to_vec())
}

/// Log-probability of the last target sentence of `doc` given its
/// preceding sentences, scored in a batch of the last `batch` sentences.
pub fn score_sequence<T: Scalar>(
    doc: &Document,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    vocab: &Vocab,
    batch: usize,
) -> Result<f64> {
    let plan = trailing_plan(doc, cfg, vocab, batch)?;
    score_instance(cfg, params, &plan, plan.len() - 1)
}
