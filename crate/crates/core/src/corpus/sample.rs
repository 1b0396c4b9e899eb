//! Tokenized training samples and the chronological split.

use alloc::string::String;
use alloc::vec::Vec;

use super::bpe::Vocab;
use crate::error::{CoreError, Result};

pub const MAX_CONTEXT_TOKENS: usize = 128;
pub const MAX_RESPONSE_TOKENS: usize = 128;

/// Raw text pair as extracted from a cleaned tree; the on-disk sample form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSample {
    pub context: Vec<String>,
    pub response: String,
    pub ts: u64,
}

/// A (context, response) pair of token sequences; the atomic training unit.
///
/// Context utterances are stored without separators; the end-of-utterance
/// marker each utterance costs at assembly time is already accounted for by
/// the truncation budget here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueSample {
    pub context: Vec<Vec<u32>>,
    pub response: Vec<u32>,
    pub ts: u64,
}

impl DialogueSample {
    /// Total context cost in assembled tokens (one trailing end-of-utterance
    /// marker per utterance).
    pub fn context_cost(&self) -> usize {
        self.context.iter().map(|u| u.len() + 1).sum()
    }

    /// Swaps sides: the response becomes the single context utterance and
    /// the flattened context (separated by end-of-utterance ids) becomes the
    /// response. Used to train the backward model p(c|r).
    pub fn reversed(&self, vocab: &Vocab) -> DialogueSample {
        let mut flat = Vec::new();
        for (i, u) in self.context.iter().enumerate() {
            if i > 0 {
                flat.push(vocab.eou_id());
            }
            flat.extend_from_slice(u);
        }
        flat.truncate(MAX_RESPONSE_TOKENS);
        DialogueSample {
            context: alloc::vec![self.response.clone()],
            response: flat,
            ts: self.ts,
        }
    }
}

/// Encodes and truncates a raw pair. The response is cut from the right to
/// 128 tokens; the context drops oldest utterances until its assembled cost
/// fits 128, and if a single utterance still exceeds the budget it keeps
/// only its newest tokens. Responses shorter than 2 tokens are rejected.
pub fn encode_sample(
    context: &[String],
    response: &str,
    ts: u64,
    vocab: &Vocab,
) -> Result<DialogueSample> {
    if context.is_empty() {
        return Err(CoreError::contract("context must be non-empty"));
    }
    let mut response_ids = vocab.encode(response);
    response_ids.truncate(MAX_RESPONSE_TOKENS);
    if response_ids.len() < 2 {
        return Err(CoreError::contract(
            "response shorter than 2 tokens after encoding",
        ));
    }
    let mut encoded: Vec<Vec<u32>> = context.iter().map(|u| vocab.encode(u)).collect();
    let cost = |utts: &[Vec<u32>]| utts.iter().map(|u| u.len() + 1).sum::<usize>();
    while encoded.len() > 1 && cost(&encoded) > MAX_CONTEXT_TOKENS {
        encoded.remove(0);
    }
    if cost(&encoded) > MAX_CONTEXT_TOKENS {
        let only = encoded.last_mut().unwrap();
        let keep = MAX_CONTEXT_TOKENS - 1;
        let skip = only.len() - keep;
        only.drain(..skip);
    }
    Ok(DialogueSample {
        context: encoded,
        response: response_ids,
        ts,
    })
}

/// Train/validation split at a timestamp: `ts < cutoff` trains, the rest
/// validates. Order is preserved on both sides.
pub fn chronological_split(
    samples: Vec<DialogueSample>,
    cutoff: u64,
) -> (Vec<DialogueSample>, Vec<DialogueSample>) {
    samples.into_iter().partition(|s| s.ts < cutoff)
}
