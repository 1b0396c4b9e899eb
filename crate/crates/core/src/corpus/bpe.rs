//! Byte-pair-encoding vocabulary: greedy highest-frequency pair merges with
//! deterministic lexicographic tie-breaking.
//!
//! Texts are whitespace-normalized; every word after the first carries a
//! leading space symbol so decoding is plain concatenation. Special tokens
//! occupy the first ids and are never produced by merges.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const BOU_TOKEN: &str = "<bou>";
pub const EOU_TOKEN: &str = "<eou>";
pub const LATENT_MASK_TOKEN: &str = "[M]";
pub const MLM_MASK_TOKEN: &str = "<mask>";
pub const NUM_SPECIAL_TOKENS: usize = 5;

/// Special ids are fixed by construction: they always occupy the first slots.
pub const PAD_ID: u32 = 0;
pub const BOU_ID: u32 = 1;
pub const EOU_ID: u32 = 2;
pub const LATENT_MASK_ID: u32 = 3;
pub const MLM_MASK_ID: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    /// id -> token string; specials, then alphabet, then merged units.
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
    merges: Vec<(String, String)>,
    /// Set when the merge loop ran out of pairs before reaching the target.
    pub saturated: bool,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_id(&self) -> u32 {
        PAD_ID
    }
    pub fn bou_id(&self) -> u32 {
        BOU_ID
    }
    pub fn eou_id(&self) -> u32 {
        EOU_ID
    }
    pub fn latent_mask_id(&self) -> u32 {
        LATENT_MASK_ID
    }
    pub fn mlm_mask_id(&self) -> u32 {
        MLM_MASK_ID
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIAL_TOKENS
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Ids that encoding may produce (everything except the specials).
    pub fn text_token_range(&self) -> core::ops::Range<u32> {
        NUM_SPECIAL_TOKENS as u32..self.size() as u32
    }

    /// Splits into words and prefixes all but the first with the space
    /// symbol, normalizing runs of whitespace to single spaces.
    fn word_units(text: &str) -> Vec<String> {
        let mut units = Vec::new();
        for (i, w) in text.split_whitespace().enumerate() {
            if i == 0 {
                units.push(w.to_string());
            } else {
                let mut s = String::with_capacity(w.len() + 1);
                s.push(' ');
                s.push_str(w);
                units.push(s);
            }
        }
        units
    }

    /// Greedily applies merges by rank within one word unit. Symbols not in
    /// the alphabet are dropped.
    fn encode_unit(&self, unit: &str) -> Vec<u32> {
        let mut symbols: Vec<String> = unit
            .chars()
            .map(|c| c.to_string())
            .filter(|s| self.index.contains_key(s))
            .collect();
        if symbols.is_empty() {
            return Vec::new();
        }
        loop {
            let mut best: Option<(u32, usize)> = None; // (merge rank, position)
            for i in 0..symbols.len().saturating_sub(1) {
                let joined = alloc::format!("{}{}", symbols[i], symbols[i + 1]);
                if let Some(&id) = self.index.get(&joined) {
                    let rank = id;
                    let is_merge = (id as usize)
                        >= NUM_SPECIAL_TOKENS + self.alphabet_len();
                    if is_merge && best.map(|(r, _)| rank < r).unwrap_or(true) {
                        best = Some((rank, i));
                    }
                }
            }
            match best {
                Some((_, pos)) => {
                    let merged = alloc::format!("{}{}", symbols[pos], symbols[pos + 1]);
                    symbols[pos] = merged;
                    symbols.remove(pos + 1);
                }
                None => break,
            }
        }
        symbols.iter().map(|s| self.index[s]).collect()
    }

    fn alphabet_len(&self) -> usize {
        self.tokens.len() - NUM_SPECIAL_TOKENS - self.merges.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for unit in Self::word_units(text) {
            ids.extend(self.encode_unit(&unit));
        }
        ids
    }

    /// Concatenates token strings; special tokens render as nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            out.push_str(self.token(id));
        }
        out
    }

    /// Plain-text serialization: metadata lines, then one merge per line.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        out.push_str("#parley-vocab 1\n");
        out.push_str(&alloc::format!(
            "#saturated {}\n",
            if self.saturated { 1 } else { 0 }
        ));
        for ch in self.tokens[NUM_SPECIAL_TOKENS..NUM_SPECIAL_TOKENS + self.alphabet_len()].iter()
        {
            out.push_str(&alloc::format!("#alpha {}\n", ch.chars().next().unwrap() as u32));
        }
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push('\t');
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(s: &str) -> Result<Vocab> {
        let mut lines = s.lines();
        match lines.next() {
            Some("#parley-vocab 1") => {}
            _ => return Err(CoreError::format("bad vocab header")),
        }
        let saturated = match lines.next() {
            Some("#saturated 0") => false,
            Some("#saturated 1") => true,
            _ => return Err(CoreError::format("bad saturated line")),
        };
        let mut alphabet = Vec::new();
        let mut merges = Vec::new();
        for line in lines {
            if let Some(code) = line.strip_prefix("#alpha ") {
                let cp: u32 = code
                    .parse()
                    .map_err(|_| CoreError::format("bad alphabet codepoint"))?;
                let ch =
                    char::from_u32(cp).ok_or_else(|| CoreError::format("invalid codepoint"))?;
                alphabet.push(ch.to_string());
            } else if let Some((l, r)) = line.split_once('\t') {
                merges.push((l.to_string(), r.to_string()));
            } else if !line.is_empty() {
                return Err(CoreError::format("unrecognized vocab line"));
            }
        }
        Ok(Self::assemble(alphabet, merges, saturated))
    }

    fn assemble(alphabet: Vec<String>, merges: Vec<(String, String)>, saturated: bool) -> Vocab {
        let mut tokens: Vec<String> = [
            PAD_TOKEN,
            BOU_TOKEN,
            EOU_TOKEN,
            LATENT_MASK_TOKEN,
            MLM_MASK_TOKEN,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        tokens.extend(alphabet);
        for (l, r) in &merges {
            tokens.push(alloc::format!("{l}{r}"));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            index,
            merges,
            saturated,
        }
    }
}

/// Trains a vocabulary on the corpus by greedy pair merging until it holds
/// `target_size` tokens. Pair frequencies count every occurrence across the
/// corpus; ties break on the lexicographically smallest merged string. When
/// the corpus runs out of pairs first, the maximal vocabulary is returned
/// with `saturated` set.
pub fn train_bpe<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    target_size: usize,
) -> Result<Vocab> {
    // word-unit frequency table over the whole corpus
    let mut unit_freq: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    let mut alphabet: BTreeMap<char, ()> = BTreeMap::new();
    for text in corpus {
        for unit in Vocab::word_units(text) {
            for c in unit.chars() {
                alphabet.insert(c, ());
            }
            let symbols: Vec<String> = unit.chars().map(|c| c.to_string()).collect();
            *unit_freq.entry(symbols).or_default() += 1;
        }
    }
    if unit_freq.is_empty() {
        return Err(CoreError::contract("empty corpus"));
    }
    let alphabet: Vec<String> = alphabet.keys().map(|c| c.to_string()).collect();
    let base = NUM_SPECIAL_TOKENS + alphabet.len();
    if target_size <= base {
        return Err(CoreError::config(alloc::format!(
            "target size {target_size} not above alphabet + specials ({base})"
        )));
    }

    let mut merges: Vec<(String, String)> = Vec::new();
    let mut saturated = false;
    while base + merges.len() < target_size {
        // count adjacent pairs
        let mut pair_freq: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, &freq) in &unit_freq {
            for w in symbols.windows(2) {
                *pair_freq
                    .entry((w[0].clone(), w[1].clone()))
                    .or_default() += freq;
            }
        }
        let best = pair_freq.into_iter().max_by(|a, b| {
            a.1.cmp(&b.1).then_with(|| {
                let sa = alloc::format!("{}{}", a.0 .0, a.0 .1);
                let sb = alloc::format!("{}{}", b.0 .0, b.0 .1);
                sb.cmp(&sa) // smaller merged string wins the tie
            })
        });
        let ((left, right), _) = match best {
            Some(p) => p,
            None => {
                saturated = true;
                break;
            }
        };
        // apply the merge everywhere
        let merged = alloc::format!("{left}{right}");
        let mut next: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        for (symbols, freq) in unit_freq {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(symbols[i].clone());
                    i += 1;
                }
            }
            *next.entry(out).or_default() += freq;
        }
        unit_freq = next;
        merges.push((left, right));
    }
    Ok(Vocab::assemble(alphabet, merges, saturated))
}

#[cfg(test)]
mod tests {
    use super::*;


    #[test]
    fn single_candidate_merge_is_learned_first() {
        let vocab = train_bpe(["aaaa"], NUM_SPECIAL_TOKENS + 1 + 1).unwrap();
        assert_eq!(vocab.merges(), &[("a".to_string(), "a".to_string())]);
        assert!(!vocab.saturated);
    }

    #[test]
    fn abab_learns_progressively_larger_units() {
        // hand-run: pairs in "abab" + " abab": (a,b) freq 4, (b,a) freq 2,
        // ( ,a) freq 1 -> merge "ab"; then ("ab","ab") freq 2 wins.
        let vocab = train_bpe(["abab abab"], NUM_SPECIAL_TOKENS + 3 + 3).unwrap();
        let merged: Vec<String> = vocab
            .merges()
            .iter()
            .map(|(l, r)| alloc::format!("{l}{r}"))
            .collect();
        assert_eq!(merged[0], "ab");
        assert_eq!(merged[1], "abab");
    }

    #[test]
    fn encode_decode_round_trips() {
        let corpus = ["the cat sat on the mat", "the cat ate the rat"];
        let vocab = train_bpe(corpus, 40).unwrap();
        for text in corpus {
            let ids = vocab.encode(text);
            assert_eq!(vocab.decode(&ids), text);
            assert_eq!(vocab.encode(&vocab.decode(&ids)), ids);
        }
    }

    #[test]
    fn determinism_same_corpus_same_merges() {
        let corpus = ["mirror mirror on the wall", "the fairest of them all"];
        let a = train_bpe(corpus, 48).unwrap();
        let b = train_bpe(corpus, 48).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_target_saturates_with_flag() {
        let vocab = train_bpe(["ab"], 100).unwrap();
        assert!(vocab.saturated);
        assert!(vocab.size() < 100);
        // still usable
        assert_eq!(vocab.decode(&vocab.encode("ab")), "ab");
    }

    #[test]
    fn empty_corpus_is_rejected_and_tiny_target_is_config_error() {
        assert!(matches!(
            train_bpe(core::iter::empty::<&str>(), 100),
            Err(CoreError::Contract(_))
        ));
        assert!(matches!(
            train_bpe(["abc"], 3),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn specials_never_come_from_text() {
        let vocab = train_bpe(["mask pad talk"], 32).unwrap();
        let ids = vocab.encode("<pad> [M] <mask>");
        assert!(ids.iter().all(|&id| !vocab.is_special(id)));
    }

    #[test]
    fn serialization_round_trips_exactly() {
        let vocab = train_bpe(["the cat sat on the mat"], 36).unwrap();
        let s = vocab.to_file_string();
        let back = Vocab::from_file_string(&s).unwrap();
        assert_eq!(vocab, back);
        assert_eq!(back.to_file_string(), s);
    }

    #[test]
    fn ids_are_dense_from_zero() {
        let vocab = train_bpe(["abc abd"], 16).unwrap();
        for id in 0..vocab.size() as u32 {
            let t = vocab.token(id);
            assert!(!t.is_empty());
        }
        assert_eq!(vocab.token(0), PAD_TOKEN);
        assert_eq!(vocab.token(4), MLM_MASK_TOKEN);
    }

    #[test]
    fn tie_break_is_lexicographic_on_merged_string() {
        // four one-word texts: pairs (x,y) and (y,z) both have frequency 2,
        // and the lexicographically smaller merged string "xy" < "yz" wins
        let vocab = train_bpe(["xy", "yz", "xy", "yz"], NUM_SPECIAL_TOKENS + 3 + 1).unwrap();
        let (l, r) = &vocab.merges()[0];
        assert_eq!(alloc::format!("{l}{r}"), "xy");
    }
}
