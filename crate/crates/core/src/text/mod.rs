//! Tokenization, vocabulary, corpus IO, span alignment and dataset splitting.

pub mod corpus;
pub mod encode;
pub mod split;
pub mod tokenizer;
pub mod vocab;

pub use corpus::{load_corpus, save_corpus, AnnotatedPair, Annotation};
pub use encode::{
    align_spans_to_mask, encode_pair, encode_text, encode_texts, mask_to_spans, RationaleTarget,
    TokenizedPair,
};
pub use split::{split_dataset, Split, DEFAULT_RATIOS};
pub use tokenizer::{tokenize, Token};
pub use vocab::Vocabulary;
