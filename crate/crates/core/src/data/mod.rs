//! Corpus ingestion, vocabulary, pseudo-documents and order-preserving batching.

mod batch;
mod corpus;
mod pseudo;
mod vocab;

pub use batch::{plan_batches, word_dropout, BatchPlan, FlattenMap, SideLayout};
pub use corpus::{
    load_parallel_corpus, parse_documents, parse_parallel, Document, RawDocument, DOC_DELIMITER,
};
pub use pseudo::{make_pseudo_documents, PseudoDocument};
pub use vocab::{TokenId, Vocab, EOS, PAD, UNK};
