use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::{Document, Vocab};
use crate::error::{Error, Result};
use crate::inference::score_sequence;
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;

/// Distance bucket labels.
pub const DISTANCE_BUCKETS: [&str; 5] = ["0", "1", "2", "3", ">3"];

/// A pronoun test item. `correct_index` is 1-based into `candidates`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveExample {
    pub source_context: Vec<String>,
    pub source_current: String,
    pub target_context: Vec<String>,
    pub candidates: Vec<String>,
    pub correct_index: usize,
    pub pronoun: String,
    pub antecedent_distance: usize,
}

impl ContrastiveExample {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::data("contrastive example without candidates"));
        }
        if self.correct_index < 1 || self.correct_index > self.candidates.len() {
            return Err(Error::data(format!(
                "correct_index {} outside 1..={}",
                self.correct_index,
                self.candidates.len()
            )));
        }
        if self.source_context.len() != self.target_context.len() {
            return Err(Error::data(format!(
                "{} source context sentences but {} target",
                self.source_context.len(),
                self.target_context.len()
            )));
        }
        let all = self
            .source_context
            .iter()
            .chain(&self.target_context)
            .chain(&self.candidates)
            .chain([&self.source_current]);
        if all
            .into_iter()
            .any(|s| s.split_whitespace().next().is_none())
        {
            return Err(Error::data("contrastive example with an empty sentence"));
        }
        Ok(())
    }

    /// The document whose last sentence pair is (current, candidate `c`).
    fn document(&self, c: usize, vocab: &Vocab) -> Result<Document> {
        let mut source: Vec<_> = self
            .source_context
            .iter()
            .map(|s| vocab.encode_str(s))
            .collect();
        source.push(vocab.encode_str(&self.source_current));
        let mut target: Vec<_> = self
            .target_context
            .iter()
            .map(|s| vocab.encode_str(s))
            .collect();
        target.push(vocab.encode_str(&self.candidates[c]));
        Document::new(0, source, target)
    }
}

pub fn read_contrastive(r: impl BufRead) -> Result<Vec<ContrastiveExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: ContrastiveExample =
            serde_json::from_str(&line).map_err(|e| Error::data(format!("line {}: {e}", i + 1)))?;
        ex.validate()
            .map_err(|e| Error::data(format!("line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_contrastive(w: &mut impl Write, examples: &[ContrastiveExample]) -> Result<()> {
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::data(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn distance_bucket(d: usize) -> &'static str {
    DISTANCE_BUCKETS[d.min(4)]
}

/// Correct and total counts of one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Breakdown {
    pub correct: usize,
    pub total: usize,
}

impl Breakdown {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += usize::from(ok);
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ContrastiveReport {
    pub overall: Breakdown,
    pub by_pronoun: BTreeMap<String, Breakdown>,
    pub by_distance: BTreeMap<String, Breakdown>,
    /// 1-based predicted index per example.
    pub predictions: Vec<usize>,
}

impl ContrastiveReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    pub fn from_predictions(examples: &[ContrastiveExample], predictions: Vec<usize>) -> Self {
        let mut r = ContrastiveReport::default();
        for k in crate::synth::PRONOUNS {
            r.by_pronoun.insert(k.to_string(), Breakdown::default());
        }
        for k in DISTANCE_BUCKETS {
            r.by_distance.insert(k.to_string(), Breakdown::default());
        }
        for (ex, &p) in examples.iter().zip(&predictions) {
            let ok = p == ex.correct_index;
            r.overall.add(ok);
            r.by_pronoun.entry(ex.pronoun.clone()).or_default().add(ok);
            r.by_distance
                .entry(distance_bucket(ex.antecedent_distance).to_string())
                .or_default()
                .add(ok);
        }
        r.predictions = predictions;
        r
    }

    /// Plain-text report: overall line, then one line per group.
    pub fn to_text(&self) -> String {
        let line = |k: &str, b: &Breakdown| {
            format!("{k}\t{:.4}\t{}/{}\n", b.accuracy(), b.correct, b.total)
        };
        let mut s = line("overall", &self.overall);
        for (k, b) in &self.by_pronoun {
            s += &line(&format!("pronoun:{k}"), b);
        }
        for k in DISTANCE_BUCKETS {
            s += &line(&format!("distance:{k}"), &self.by_distance[k]);
        }
        s
    }
}

/// 1-based index of the highest score; the first one wins ties.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best + 1
}

/// Scores every candidate in context and reports micro-averaged accuracy.
/// `batch` bounds how many trailing sentences share the scoring batch.
pub fn contrastive_accuracy<T: Scalar>(
    examples: &[ContrastiveExample],
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    vocab: &Vocab,
    batch: usize,
) -> Result<ContrastiveReport> {
    let mut predictions = Vec::with_capacity(examples.len());
    for ex in examples {
        ex.validate()?;
        let scores = (0..ex.candidates.len())
            .map(|c| score_sequence(&ex.document(c, vocab)?, cfg, params, vocab, batch))
            .collect::<Result<Vec<f64>>>()?;
        predictions.push(predict(&scores));
    }
    Ok(ContrastiveReport::from_predictions(examples, predictions))
}
