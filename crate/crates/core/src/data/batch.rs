use rand::Rng;

use crate::error::{Error, Result};

use super::corpus::Document;
use super::pseudo::{make_pseudo_documents, PseudoDocument};
use super::vocab::{TokenId, Vocab, PAD, UNK};

/// Bijection between current-sentence tokens of a padded batch and the
/// flattened sequence of length `n * d`, ordered by instance then position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlattenMap {
    pub n: usize,
    /// Padded current-sentence length.
    pub d: usize,
    /// Padded pseudo-document length (row width of the batch).
    pub width: usize,
    /// Flattened position -> row of the `[n * width]` batch; `None` is padding.
    pub gather: Vec<Option<usize>>,
    /// Batch row -> flattened position; `None` outside current segments.
    pub scatter: Vec<Option<usize>>,
}

impl FlattenMap {
    fn new(n: usize, width: usize, current: &[(usize, usize)]) -> Self {
        let d = current.iter().map(|c| c.1).max().unwrap_or(0);
        let mut gather = vec![None; n * d];
        let mut scatter = vec![None; n * width];
        for (i, &(start, len)) in current.iter().enumerate() {
            for t in 0..len {
                let row = i * width + start + t;
                gather[i * d + t] = Some(row);
                scatter[row] = Some(i * d + t);
            }
        }
        FlattenMap {
            n,
            d,
            width,
            gather,
            scatter,
        }
    }

    /// Whether flattened position `p` holds a real token.
    pub fn is_real(&self, p: usize) -> bool {
        self.gather[p].is_some()
    }

    pub fn len(&self) -> usize {
        self.n * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Padded token matrix of one side of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideLayout {
    /// Padded pseudo-document length.
    pub width: usize,
    /// Row-major `[n, width]`, `PAD`-filled.
    pub tokens: Vec<TokenId>,
    pub lengths: Vec<usize>,
    /// `(start, len)` of each instance's current segment.
    pub current: Vec<(usize, usize)>,
    pub flatten: FlattenMap,
}

impl SideLayout {
    fn new(seqs: &[&[TokenId]], current: Vec<(usize, usize)>) -> Self {
        let n = seqs.len();
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut tokens = vec![PAD; n * width];
        for (i, s) in seqs.iter().enumerate() {
            tokens[i * width..i * width + s.len()].copy_from_slice(s);
        }
        let flatten = FlattenMap::new(n, width, &current);
        SideLayout {
            width,
            tokens,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            current,
            flatten,
        }
    }

    /// Padded current-sentence length `d`.
    pub fn current_len(&self) -> usize {
        self.flatten.d
    }

    pub fn is_current(&self, instance: usize, pos: usize) -> bool {
        let (s, l) = self.current[instance];
        pos >= s && pos < s + l
    }
}

/// An ordered batch of pseudo-documents with padded layouts for both sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub docs: Vec<PseudoDocument>,
    pub source: SideLayout,
    pub target: SideLayout,
    /// Decoder output tokens `[n, target.width]`; `None` at padding.
    pub target_out: Vec<Option<TokenId>>,
}

impl BatchPlan {
    pub fn new(docs: Vec<PseudoDocument>) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let src: Vec<&[TokenId]> = docs.iter().map(|d| d.source.as_slice()).collect();
        let tgt: Vec<&[TokenId]> = docs.iter().map(|d| d.target_in.as_slice()).collect();
        let cs = docs
            .iter()
            .map(|d| (d.current_source().start, d.current_source().len()))
            .collect();
        let ct = docs
            .iter()
            .map(|d| (d.current_target().start, d.current_target().len()))
            .collect();
        let source = SideLayout::new(&src, cs);
        let target = SideLayout::new(&tgt, ct);
        let mut target_out = vec![None; docs.len() * target.width];
        for (i, d) in docs.iter().enumerate() {
            for (t, &tok) in d.target_out.iter().enumerate() {
                target_out[i * target.width + t] = Some(tok);
            }
        }
        Ok(BatchPlan {
            docs,
            source,
            target,
            target_out,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc_ids(&self) -> Vec<usize> {
        self.docs.iter().map(|d| d.doc_id).collect()
    }

    /// Output targets restricted to current segments.
    pub fn current_targets(&self) -> Vec<Option<TokenId>> {
        let w = self.target.width;
        self.target_out
            .iter()
            .enumerate()
            .map(|(r, t)| t.filter(|_| self.target.is_current(r / w, r % w)))
            .collect()
    }

    /// Copy with word dropout applied to source and target-input tokens.
    pub fn with_word_dropout<R: Rng>(&self, p: f64, vocab: &Vocab, rng: &mut R) -> Self {
        let mut out = self.clone();
        out.source.tokens = word_dropout(&self.source.tokens, p, vocab, rng);
        out.target.tokens = word_dropout(&self.target.tokens, p, vocab, rng);
        out
    }
}

/// Replaces each non-reserved token by `<unk>` with probability `p`.
pub fn word_dropout<R: Rng>(
    tokens: &[TokenId],
    p: f64,
    vocab: &Vocab,
    rng: &mut R,
) -> Vec<TokenId> {
    if p <= 0.0 {
        return tokens.to_vec();
    }
    tokens
        .iter()
        .map(|&t| {
            if vocab.is_reserved(t) || !rng.gen_bool(p.min(1.0)) {
                t
            } else {
                UNK
            }
        })
        .collect()
}

/// Groups consecutive pseudo-documents of the corpus, in corpus order, into
/// batches of at most `batch_size` sentences. A batch is also closed early
/// when adding the next pseudo-document would push its source plus target
/// token count past `token_cap`.
pub fn plan_batches(
    corpus: &[Document],
    vocab: &Vocab,
    c_minus: usize,
    batch_size: usize,
    token_cap: Option<usize>,
) -> Result<Vec<BatchPlan>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut plans = Vec::new();
    let mut cur: Vec<PseudoDocument> = Vec::new();
    let mut tokens = 0usize;
    for doc in corpus {
        for pd in make_pseudo_documents(doc, c_minus, vocab)? {
            let t = pd.source.len() + pd.target_in.len();
            let over_cap = token_cap.is_some_and(|cap| tokens + t > cap);
            if !cur.is_empty() && (cur.len() == batch_size || over_cap) {
                plans.push(BatchPlan::new(std::mem::take(&mut cur))?);
                tokens = 0;
            }
            tokens += t;
            cur.push(pd);
        }
    }
    if !cur.is_empty() {
        plans.push(BatchPlan::new(cur)?);
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::RawDocument;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(lens: &[usize]) -> (Vec<Document>, Vocab) {
        let raws: Vec<RawDocument> = lens
            .iter()
            .enumerate()
            .map(|(d, &m)| RawDocument {
                doc_id: d,
                source: (0..m)
                    .map(|i| vec![format!("s{d}_{i}"); 1 + i % 3])
                    .collect(),
                target: (0..m)
                    .map(|i| vec![format!("t{d}_{i}"); 1 + (i + 1) % 3])
                    .collect(),
            })
            .collect();
        let v = Vocab::build(&raws, 1, 100).unwrap();
        (
            raws.iter().map(|r| v.encode_document(r).unwrap()).collect(),
            v,
        )
    }

    #[test]
    fn one_batch_of_six() {
        let (c, v) = corpus(&[6]);
        let plans = plan_batches(&c, &v, 3, 6, None).unwrap();
        assert_eq!(plans.len(), 1);
        let idx: Vec<usize> = plans[0].docs.iter().map(|d| d.current_index).collect();
        assert_eq!(idx, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn consecutive_batches_partition_in_order() {
        let (c, v) = corpus(&[5, 4]);
        let plans = plan_batches(&c, &v, 3, 4, None).unwrap();
        let seq: Vec<(usize, usize)> = plans
            .iter()
            .flat_map(|p| p.docs.iter().map(|d| (d.doc_id, d.current_index)))
            .collect();
        assert_eq!(
            seq,
            vec![
                (0, 1),
                (0, 2),
                (0, 3),
                (0, 4),
                (0, 5),
                (1, 1),
                (1, 2),
                (1, 3),
                (1, 4)
            ]
        );
        assert_eq!(plans[0].len(), 4);
        assert_eq!(plans[1].doc_ids(), vec![0, 1, 1, 1]);
    }

    #[test]
    fn batch_of_one_flattens_to_current_sentence() {
        let (c, v) = corpus(&[3]);
        let plans = plan_batches(&c, &v, 2, 1, None).unwrap();
        let p = &plans[2];
        let rows: Vec<usize> = p.target.flatten.gather.iter().map(|r| r.unwrap()).collect();
        let (s, l) = p.target.current[0];
        assert_eq!(rows, (s..s + l).collect::<Vec<_>>());
    }

    #[test]
    fn token_cap_closes_batches_early() {
        let (c, v) = corpus(&[8]);
        let capped = plan_batches(&c, &v, 3, 8, Some(30)).unwrap();
        assert!(capped.len() > 1);
        assert!(capped.iter().all(|p| p.len() <= 8));
        let n: usize = capped.iter().map(BatchPlan::len).sum();
        assert_eq!(n, 8);
        assert!(plan_batches(&c, &v, 3, 0, None).is_err());
    }

    #[test]
    fn current_targets_count() {
        let (c, v) = corpus(&[6]);
        let p = &plan_batches(&c, &v, 3, 6, None).unwrap()[0];
        let counted = p.current_targets().iter().flatten().count();
        let expected: usize = c[0].target.iter().map(|s| s.len() + 1).sum();
        assert_eq!(counted, expected);
    }

    #[test]
    fn word_dropout_rates() {
        let (_, v) = corpus(&[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let word = v.id("s0_0");
        let toks = vec![word; 100_000];
        assert_eq!(word_dropout(&toks, 0.0, &v, &mut rng), toks);
        let out = word_dropout(&toks, 0.1, &v, &mut rng);
        let frac = out.iter().filter(|&&t| t == UNK).count() as f64 / toks.len() as f64;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
        let idx = vec![v.index_token(3); 1000];
        assert_eq!(word_dropout(&idx, 0.99, &v, &mut rng), idx);
    }
}
