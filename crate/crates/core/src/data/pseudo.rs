use std::ops::Range;

use crate::error::{Error, Result};

use super::corpus::Document;
use super::vocab::{TokenId, Vocab, EOS};

/// Current sentence plus its preceding local context, on both sides.
///
/// Every sentence is one segment. Source segments read `<idx:s> x_s </s>`;
/// target segments read `<idx:s> y_s` as decoder input and `y_s </s>` as
/// output, where `s` is the sentence's 1-based position in its document.
/// The current sentence is always the last segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoDocument {
    pub doc_id: usize,
    /// 1-based position of the current sentence in its document.
    pub current_index: usize,
    /// 1-based positions of the context sentences, ascending.
    pub context_indices: Vec<usize>,
    pub source: Vec<TokenId>,
    pub source_starts: Vec<usize>,
    pub target_in: Vec<TokenId>,
    pub target_out: Vec<TokenId>,
    pub target_starts: Vec<usize>,
    /// Index token of the current sentence.
    pub index_token: TokenId,
}

impl PseudoDocument {
    /// Assembles a pseudo-document from `(position, source, target)`
    /// sentences; the last one is current. An empty current target yields a
    /// decoder input of just its index token.
    pub fn assemble(
        doc_id: usize,
        sentences: &[(usize, &[TokenId], &[TokenId])],
        vocab: &Vocab,
    ) -> Result<Self> {
        let Some(&(current_index, _, _)) = sentences.last() else {
            return Err(Error::invalid("pseudo-document needs a current sentence"));
        };
        let mut pd = PseudoDocument {
            doc_id,
            current_index,
            context_indices: sentences[..sentences.len() - 1]
                .iter()
                .map(|s| s.0)
                .collect(),
            source: Vec::new(),
            source_starts: Vec::new(),
            target_in: Vec::new(),
            target_out: Vec::new(),
            target_starts: Vec::new(),
            index_token: vocab.index_token(current_index),
        };
        for &(pos, src, tgt) in sentences {
            let idx = vocab.index_token(pos);
            pd.source_starts.push(pd.source.len());
            pd.source.push(idx);
            pd.source.extend_from_slice(src);
            pd.source.push(EOS);
            pd.target_starts.push(pd.target_in.len());
            pd.target_in.push(idx);
            pd.target_in.extend_from_slice(tgt);
            pd.target_out.extend_from_slice(tgt);
            pd.target_out.push(EOS);
        }
        Ok(pd)
    }

    pub fn current_source(&self) -> Range<usize> {
        *self.source_starts.last().unwrap()..self.source.len()
    }

    pub fn current_target(&self) -> Range<usize> {
        *self.target_starts.last().unwrap()..self.target_in.len()
    }

    /// Target tokens of the current sentence, without index token or EOS.
    pub fn current_target_tokens(&self) -> &[TokenId] {
        let r = self.current_target();
        &self.target_in[r.start + 1..r.end]
    }

    /// Same pseudo-document with the current target sentence replaced.
    pub fn with_current_target(&self, tokens: &[TokenId]) -> Self {
        let r = self.current_target();
        let mut pd = self.clone();
        pd.target_in.truncate(r.start + 1);
        pd.target_in.extend_from_slice(tokens);
        pd.target_out.truncate(r.start);
        pd.target_out.extend_from_slice(tokens);
        pd.target_out.push(EOS);
        pd
    }

    pub fn n_segments(&self) -> usize {
        self.source_starts.len()
    }
}

/// One pseudo-document per sentence of `doc`: sentence `i` preceded by
/// sentences `max(1, i - c_minus) ..= i - 1`.
pub fn make_pseudo_documents(
    doc: &Document,
    c_minus: usize,
    vocab: &Vocab,
) -> Result<Vec<PseudoDocument>> {
    (1..=doc.len())
        .map(|i| {
            let first = i.saturating_sub(c_minus).max(1);
            let sents: Vec<(usize, &[TokenId], &[TokenId])> = (first..=i)
                .map(|s| {
                    (
                        s,
                        doc.source[s - 1].as_slice(),
                        doc.target[s - 1].as_slice(),
                    )
                })
                .collect();
            PseudoDocument::assemble(doc.doc_id, &sents, vocab)
        })
        .collect()
}
