//! Generated corpora: a copy task and a long-distance pronoun task.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::RawDocument;
use crate::eval::ContrastiveExample;
use crate::rng::{KeyedRng, Purpose};

/// Target pronouns, indexed by gender.
pub const PRONOUNS: [&str; 3] = ["er", "es", "sie"];

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Documents whose target side equals the source side.
pub fn copy_corpus(
    n_sentences: usize,
    doc_len: usize,
    vocab: usize,
    seed: u64,
) -> Vec<RawDocument> {
    let mut rng = KeyedRng::new(seed).stream(Purpose::Synthetic, 0);
    let lexicon = words("w", vocab.max(1));
    let doc_len = doc_len.max(1);
    let mut docs = Vec::new();
    let mut made = 0;
    while made < n_sentences {
        let m = doc_len.min(n_sentences - made);
        let source: Vec<Vec<String>> = (0..m)
            .map(|_| {
                (0..rng.gen_range(3..=6))
                    .map(|_| lexicon.choose(&mut rng).unwrap().clone())
                    .collect()
            })
            .collect();
        docs.push(RawDocument {
            doc_id: docs.len(),
            target: source.clone(),
            source,
        });
        made += m;
    }
    docs
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextTaskConfig {
    pub docs: usize,
    pub doc_len: usize,
    pub filler_words: usize,
    pub nouns_per_gender: usize,
    /// Nouns inserted into each noun sentence.
    pub nouns_per_sentence: usize,
    /// Inclusive range of antecedent distances.
    pub min_distance: usize,
    pub max_distance: usize,
    /// Inclusive range of filler words per sentence.
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for ContextTaskConfig {
    fn default() -> Self {
        ContextTaskConfig {
            docs: 500,
            doc_len: 16,
            filler_words: 16,
            nouns_per_gender: 3,
            nouns_per_sentence: 3,
            min_distance: 4,
            max_distance: 6,
            min_words: 1,
            max_words: 3,
        }
    }
}

/// One generated document plus the positions (0-based) of its pronoun
/// sentences and their antecedent distances.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDocument {
    pub doc: RawDocument,
    pub gender: usize,
    pub pronouns: Vec<(usize, usize)>,
}

fn source_word(w: &str) -> String {
    format!("s{w}")
}

fn target_word(w: &str) -> String {
    format!("t{w}")
}

/// Pronoun task. Every document has one grammatical gender. A sentence
/// introducing a noun of that gender is followed, 4 to 6 sentences later,
/// by a sentence opening with the source pronoun `it` whose target pronoun
/// (`er`, `es`, `sie`) is fixed by the gender; the next noun comes right
/// after it. The sentences in between hold fillers only, so a
/// three-sentence local context never shows the gender.
pub fn context_task(cfg: &ContextTaskConfig, seed: u64) -> Vec<TaskDocument> {
    let mut rng = KeyedRng::new(seed).stream(Purpose::Synthetic, 1);
    let filler = words("f", cfg.filler_words.max(1));
    (0..cfg.docs)
        .map(|d| task_document(cfg, d, &filler, &mut rng))
        .collect()
}

fn task_document(
    cfg: &ContextTaskConfig,
    doc_id: usize,
    filler: &[String],
    rng: &mut ChaCha8Rng,
) -> TaskDocument {
    let gender = rng.gen_range(0..3);
    let m = cfg.doc_len.max(1);
    let (lo, hi) = (
        cfg.min_distance.max(1),
        cfg.max_distance.max(cfg.min_distance.max(1)),
    );
    let mut has_noun = vec![false; m];
    let mut pronoun_dist = vec![None; m];
    let mut noun = 0;
    while noun < m {
        has_noun[noun] = true;
        let dist = rng.gen_range(lo..=hi);
        if noun + dist >= m {
            break;
        }
        pronoun_dist[noun + dist] = Some(dist);
        noun += dist + 1;
    }
    let mut source = Vec::with_capacity(m);
    let mut target = Vec::with_capacity(m);
    let mut pronouns = Vec::new();
    for i in 0..m {
        let len = rng.gen_range(cfg.min_words..=cfg.max_words.max(cfg.min_words));
        let body: Vec<String> = (0..len)
            .map(|_| filler.choose(rng).unwrap().clone())
            .collect();
        let mut s: Vec<String> = body.iter().map(|w| source_word(w)).collect();
        let mut t: Vec<String> = body.iter().map(|w| target_word(w)).collect();
        if has_noun[i] {
            for _ in 0..cfg.nouns_per_sentence.max(1) {
                let noun = format!(
                    "n{gender}_{}",
                    rng.gen_range(0..cfg.nouns_per_gender.max(1))
                );
                let at = rng.gen_range(0..=s.len());
                s.insert(at, source_word(&noun));
                t.insert(at, target_word(&noun));
            }
        }
        if let Some(dist) = pronoun_dist[i] {
            s.insert(0, "it".to_string());
            t.insert(0, PRONOUNS[gender].to_string());
            pronouns.push((i, dist));
        }
        source.push(s);
        target.push(t);
    }
    TaskDocument {
        doc: RawDocument {
            doc_id,
            source,
            target,
        },
        gender,
        pronouns,
    }
}

/// Contrastive examples for every pronoun sentence: all preceding sentences
/// as context and the three pronoun choices as candidates.
pub fn contrastive_examples(docs: &[TaskDocument]) -> Vec<ContrastiveExample> {
    let join = |s: &[String]| s.join(" ");
    let mut out = Vec::new();
    for td in docs {
        for &(pos, dist) in &td.pronouns {
            let reference = &td.doc.target[pos];
            let candidates = PRONOUNS
                .iter()
                .map(|p| {
                    let mut c = reference.clone();
                    c[0] = p.to_string();
                    join(&c)
                })
                .collect();
            out.push(ContrastiveExample {
                source_context: td.doc.source[..pos].iter().map(|s| join(s)).collect(),
                source_current: join(&td.doc.source[pos]),
                target_context: td.doc.target[..pos].iter().map(|s| join(s)).collect(),
                candidates,
                correct_index: td.gender + 1,
                pronoun: PRONOUNS[td.gender].to_string(),
                antecedent_distance: dist,
            });
        }
    }
    out
}
