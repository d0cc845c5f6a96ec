use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::corpus::{Document, RawDocument};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const EOS: TokenId = 2;
const FIRST_INDEX: TokenId = 3;

const PAD_STR: &str = "<pad>";
const UNK_STR: &str = "<unk>";
const EOS_STR: &str = "</s>";
const HEADER: &str = "# docflat vocabulary v1";

fn index_str(i: usize) -> String {
    format!("<idx:{i}>")
}

/// Joint source/target vocabulary.
///
/// Layout: `<pad>`, `<unk>`, `</s>`, then the index tokens `<idx:1>` ..
/// `<idx:N>` that stand in for BOS, then corpus tokens by descending
/// frequency (ties broken lexicographically).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    n_index: usize,
}

impl Vocab {
    fn with_tokens(n_index: usize, words: impl IntoIterator<Item = String>) -> Result<Self> {
        if n_index < 1 {
            return Err(Error::invalid("at least one index token is required"));
        }
        let mut tokens = vec![
            PAD_STR.to_string(),
            UNK_STR.to_string(),
            EOS_STR.to_string(),
        ];
        tokens.extend((1..=n_index).map(index_str));
        tokens.extend(words);
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab {
            tokens,
            ids,
            n_index,
        })
    }

    /// Builds from both sides of a corpus. Tokens seen fewer than `min_freq`
    /// times are left out and map to `<unk>`.
    pub fn build(corpus: &[RawDocument], min_freq: usize, n_max_index: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in corpus {
            for tok in doc.source.iter().chain(&doc.target).flatten() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let reserved =
            |t: &str| t == PAD_STR || t == UNK_STR || t == EOS_STR || parse_index(t).is_some();
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && !reserved(t))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::with_tokens(n_max_index, words.into_iter().map(|(t, _)| t.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_index(&self) -> usize {
        self.n_index
    }

    /// Id of `token`; unknown and reserved strings map to `<unk>`.
    pub fn id(&self, token: &str) -> TokenId {
        match self.ids.get(token) {
            Some(&i) if !self.is_reserved(i) => i,
            _ => UNK,
        }
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map_or(UNK_STR, String::as_str)
    }

    /// Token standing in for BOS of the `i`-th (1-based) sentence of a
    /// document. Positions past the index block share its last token.
    pub fn index_token(&self, i: usize) -> TokenId {
        FIRST_INDEX + i.clamp(1, self.n_index) - 1
    }

    /// Inverse of [`Vocab::index_token`].
    pub fn index_of(&self, id: TokenId) -> Option<usize> {
        (FIRST_INDEX..FIRST_INDEX + self.n_index)
            .contains(&id)
            .then(|| id - FIRST_INDEX + 1)
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id < FIRST_INDEX + self.n_index
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<TokenId> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_str(&self, sentence: &str) -> Vec<TokenId> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn encode_document(&self, doc: &RawDocument) -> Result<Document> {
        Document::new(
            doc.doc_id,
            doc.source.iter().map(|s| self.encode(s)).collect(),
            doc.target.iter().map(|s| self.encode(s)).collect(),
        )
    }

    /// Whitespace-joined surface form, stopping at `</s>` and dropping
    /// padding and index tokens.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && self.index_of(i).is_none())
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{HEADER}\n# reserved: 0={PAD_STR} 1={UNK_STR} 2={EOS_STR} {}..{}=<idx:1>..<idx:{}>\n# index_tokens={}\n",
            FIRST_INDEX,
            FIRST_INDEX + self.n_index - 1,
            self.n_index,
            self.n_index
        );
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        let mut n_index = None;
        while let Some(l) = lines.peek() {
            if !l.starts_with('#') {
                break;
            }
            if let Some(v) = l.strip_prefix("# index_tokens=") {
                n_index = Some(
                    v.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::data(format!("vocab header: {e}")))?,
                );
            }
            lines.next();
        }
        let n_index = n_index.ok_or_else(|| Error::data("vocab header lacks index_tokens"))?;
        let toks: Vec<&str> = lines.collect();
        let reserved = FIRST_INDEX + n_index;
        if toks.len() < reserved {
            return Err(Error::data("vocab shorter than its reserved block"));
        }
        let expect_reserved = [PAD_STR, UNK_STR, EOS_STR];
        for (i, t) in toks[..reserved].iter().enumerate() {
            let ok = if i < FIRST_INDEX {
                *t == expect_reserved[i]
            } else {
                *t == index_str(i - FIRST_INDEX + 1)
            };
            if !ok {
                return Err(Error::data(format!(
                    "vocab line for id {i} is {t:?}, expected a reserved token"
                )));
            }
        }
        Self::with_tokens(n_index, toks[reserved..].iter().map(|t| t.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn parse_index(t: &str) -> Option<usize> {
    t.strip_prefix("<idx:")?.strip_suffix('>')?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(src: &[&str], tgt: &[&str]) -> RawDocument {
        let split = |s: &&str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        RawDocument {
            doc_id: 0,
            source: src.iter().map(split).collect(),
            target: tgt.iter().map(split).collect(),
        }
    }

    #[test]
    fn min_freq_maps_rare_to_unk() {
        let corpus = vec![raw(&["a a b"], &["a"])];
        let v = Vocab::build(&corpus, 2, 4).unwrap();
        assert_ne!(v.id("a"), UNK);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn index_block_size_and_clamp() {
        let v = Vocab::build(&[], 1, 500).unwrap();
        let idx: Vec<_> = (0..v.len()).filter(|&i| v.index_of(i).is_some()).collect();
        assert_eq!(idx.len(), 500);
        assert!(idx.windows(2).all(|w| w[1] == w[0] + 1));
        assert_eq!(v.index_of(v.index_token(7)), Some(7));
        assert_eq!(v.index_of(v.index_token(9999)), Some(500));
        assert!(Vocab::build(&[], 1, 0).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let corpus = vec![raw(&["x y z #"], &["X Y <pad>"])];
        let v = Vocab::build(&corpus, 1, 5).unwrap();
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        for i in 0..v.len() {
            assert_eq!(back.token(i), v.token(i));
        }
        assert_eq!(v.id("<pad>"), UNK);
        assert_ne!(v.id("#"), UNK);
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocab::build(&[raw(&["p q"], &["r"])], 1, 2).unwrap();
        let ids = vec![v.index_token(1), v.id("p"), v.id("q"), EOS, v.id("r")];
        assert_eq!(v.decode(&ids), "p q");
    }
}
