//! Metrics: BLEU, paired bootstrap, contrastive accuracy, sentence-level
//! attention maps and throughput.

mod attention_map;
mod bench;
mod bleu;
mod contrastive;

pub use attention_map::{aggregate_attention, document_attention_map, AttentionMatrix};
pub use bench::{ups_benchmark, BenchConfig, BenchRow};
pub use bleu::{
    bootstrap_indices, corpus_bleu, paired_bootstrap, sentence_stats, BleuStats, DEFAULT_RESAMPLES,
    MAX_N,
};
pub use contrastive::{
    contrastive_accuracy, distance_bucket, predict, read_contrastive, write_contrastive, Breakdown,
    ContrastiveExample, ContrastiveReport, DISTANCE_BUCKETS,
};
