//! Corpus pipeline: message-tree cleaning, conversation-pair extraction,
//! chronological splitting, and the BPE vocabulary.
//!
//! Cleaning is two-pass by design: the character-level rules run before any
//! vocabulary exists, the token-count rule runs once the BPE vocab has been
//! trained on the surviving text.

mod bpe;
mod sample;
mod tree;

pub use bpe::{train_bpe, Vocab, NUM_SPECIAL_TOKENS};
pub use sample::{
    chronological_split, encode_sample, DialogueSample, RawSample, MAX_CONTEXT_TOKENS,
    MAX_RESPONSE_TOKENS,
};
pub use tree::{
    annotate_repeats, clean_tree, extract_pairs, CleaningOutcome, MessageNode, MessageTree,
    RemovalCounts, RuleConfig,
};
