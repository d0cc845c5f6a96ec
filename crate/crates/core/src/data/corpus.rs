use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::vocab::TokenId;

/// Line that opens every document in a corpus file.
pub const DOC_DELIMITER: &str = "<d>";

/// A sentence-aligned document pair of whitespace-tokenized sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub doc_id: usize,
    pub source: Vec<Vec<String>>,
    pub target: Vec<Vec<String>>,
}

/// A document pair mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: usize,
    pub source: Vec<Vec<TokenId>>,
    pub target: Vec<Vec<TokenId>>,
}

impl Document {
    pub fn new(
        doc_id: usize,
        source: Vec<Vec<TokenId>>,
        target: Vec<Vec<TokenId>>,
    ) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::data(format!(
                "document {doc_id}: {} source vs {} target sentences",
                source.len(),
                target.len()
            )));
        }
        if source.iter().chain(&target).any(Vec::is_empty) {
            return Err(Error::data(format!(
                "document {doc_id} contains an empty sentence"
            )));
        }
        Ok(Document {
            doc_id,
            source,
            target,
        })
    }

    /// Number of sentences.
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Splits one side of a corpus into documents of tokenized sentences.
/// Line numbers in errors are 1-based.
pub fn parse_documents(text: &str) -> Result<Vec<Vec<Vec<String>>>> {
    let mut docs: Vec<Vec<Vec<String>>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line == DOC_DELIMITER {
            docs.push(Vec::new());
            continue;
        }
        let Some(doc) = docs.last_mut() else {
            return Err(Error::data(format!(
                "line {}: sentence before the first {DOC_DELIMITER} delimiter",
                n + 1
            )));
        };
        let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if toks.is_empty() {
            return Err(Error::data(format!("line {}: empty sentence", n + 1)));
        }
        doc.push(toks);
    }
    Ok(docs)
}

/// Parses an aligned source/target pair held in memory.
pub fn parse_parallel(src: &str, tgt: &str) -> Result<Vec<RawDocument>> {
    let sl: Vec<&str> = src.lines().collect();
    let tl: Vec<&str> = tgt.lines().collect();
    for (n, (a, b)) in sl.iter().zip(&tl).enumerate() {
        if (a.trim() == DOC_DELIMITER) != (b.trim() == DOC_DELIMITER) {
            return Err(Error::data(format!(
                "line {}: document delimiters are misaligned",
                n + 1
            )));
        }
    }
    if sl.len() != tl.len() {
        return Err(Error::data(format!(
            "line {}: source has {} lines but target has {}",
            sl.len().min(tl.len()) + 1,
            sl.len(),
            tl.len()
        )));
    }
    let s = parse_documents(src)?;
    let t = parse_documents(tgt)?;
    Ok(s.into_iter()
        .zip(t)
        .enumerate()
        .map(|(doc_id, (source, target))| RawDocument {
            doc_id,
            source,
            target,
        })
        .collect())
}

/// Reads a sentence-aligned parallel corpus with `<d>` delimiter lines.
pub fn load_parallel_corpus(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
) -> Result<Vec<RawDocument>> {
    let src = fs::read_to_string(src_path)?;
    let tgt = fs::read_to_string(tgt_path)?;
    parse_parallel(&src, &tgt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_documents() {
        let src = "<d>\na b\nc\nd e f\n<d>\ng\nh i\n";
        let tgt = "<d>\nA B\nC\nD E F\n<d>\nG\nH I\n";
        let docs = parse_parallel(src, tgt).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].source.len(), 3);
        assert_eq!(docs[1].target.len(), 2);
        assert_eq!(docs[1].target[1], vec!["H", "I"]);
        assert_eq!(docs[1].doc_id, 1);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_parallel("", "").unwrap().is_empty());
    }

    #[test]
    fn misaligned_delimiter_reports_line() {
        let err = parse_parallel("<d>\na\n<d>\nb\n", "<d>\nA\nB\n<d>\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn unequal_line_counts_report_first_extra_line() {
        let err = parse_parallel("<d>\na\nb\n", "<d>\nA\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn undelimited_leading_text_rejected() {
        assert!(parse_parallel("a\n<d>\nb\n", "A\n<d>\nB\n").is_err());
    }

    #[test]
    fn document_invariants() {
        assert!(Document::new(0, vec![vec![1]], vec![]).is_err());
        assert!(Document::new(0, vec![vec![]], vec![vec![1]]).is_err());
        assert_eq!(
            Document::new(0, vec![vec![1]], vec![vec![2]])
                .unwrap()
                .len(),
            1
        );
    }
}
