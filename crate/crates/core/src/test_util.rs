//! Shared fixtures for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Document, RawDocument, Vocab};
use crate::model::{ModelConfig, Variant};

/// Vocabulary of exactly 16 ids: 3 reserved, 4 index tokens, 9 words.
pub fn micro_vocab() -> Vocab {
    let words: Vec<String> = (0..9).map(|i| format!("w{i}")).collect();
    let raw = RawDocument {
        doc_id: 0,
        source: vec![words.clone()],
        target: vec![words],
    };
    let v = Vocab::build(&[raw], 1, 4).unwrap();
    assert_eq!(v.len(), 16);
    v
}

pub fn random_corpus(v: &Vocab, docs: &[usize], seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = v.id("w0");
    let sent = |rng: &mut ChaCha8Rng| {
        (0..rng.gen_range(1..4))
            .map(|_| lo + rng.gen_range(0..9))
            .collect::<Vec<_>>()
    };
    docs.iter()
        .enumerate()
        .map(|(d, &m)| {
            let src = (0..m).map(|_| sent(&mut rng)).collect();
            let tgt = (0..m).map(|_| sent(&mut rng)).collect();
            Document::new(d, src, tgt).unwrap()
        })
        .collect()
}

pub fn micro_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        ffn_dim: 16,
        dropout: 0.0,
        c_minus: if variant == Variant::Sent2Sent { 0 } else { 1 },
        ..ModelConfig::new(variant, 16)
    }
}
