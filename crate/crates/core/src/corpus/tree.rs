//! Message trees and the ten cleaning rules.
//!
//! A node that violates any rule is removed together with its whole
//! subtree. Rules are checked in a fixed order and the first match is the
//! one reported, so removal counts are reproducible.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use super::bpe::Vocab;
use super::sample::RawSample;
use crate::error::{CoreError, Result};

/// One social-media comment inside a message tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageNode {
    pub id: u64,
    pub parent_id: Option<u64>,
    pub text: String,
    pub author: String,
    pub ts: u64,
    pub channel: String,
    pub known_bot: bool,
    pub quarantined: bool,
    /// How often this exact text occurs across the whole corpus; filled by
    /// [`annotate_repeats`] before cleaning.
    pub repeat_count: u64,
}

/// A forest of message nodes in input order; parents may appear after
/// children.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MessageTree {
    pub nodes: Vec<MessageNode>,
}

/// Thresholds and word lists for the cleaning rules. The offensive-word and
/// bot lists are inputs, not shipped defaults.
#[derive(Debug, Clone)]
pub struct RuleConfig {
    pub max_tokens: usize,
    pub min_tokens: usize,
    pub max_word_chars: usize,
    pub max_chars: usize,
    pub min_alpha_ratio: f64,
    /// Extra substrings beyond the built-in `r/`, `u/`, `&amp`.
    pub extra_special_strings: Vec<String>,
    pub parent_overlap_jaccard: f64,
    pub max_repeats: u64,
    /// Lowercased words matched whole-token, case-insensitively.
    pub offensive_words: Vec<String>,
    pub known_bots: Vec<String>,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            max_tokens: 128,
            min_tokens: 2,
            max_word_chars: 30,
            max_chars: 1024,
            min_alpha_ratio: 0.7,
            extra_special_strings: Vec::new(),
            parent_overlap_jaccard: 0.9,
            max_repeats: 100,
            offensive_words: Vec::new(),
            known_bots: Vec::new(),
        }
    }
}

const BUILTIN_SPECIAL_STRINGS: [&str; 3] = ["r/", "u/", "&amp"];

/// Removal tally: `per_rule[i]` counts nodes whose first violated rule was
/// rule `i+1`; `subtree` counts clean nodes removed because an ancestor
/// offended. The grand total equals nodes-before minus nodes-after.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RemovalCounts {
    pub per_rule: [usize; 10],
    pub subtree: usize,
}

impl RemovalCounts {
    pub fn total(&self) -> usize {
        self.per_rule.iter().sum::<usize>() + self.subtree
    }
}

#[derive(Debug, Clone)]
pub struct CleaningOutcome {
    pub tree: MessageTree,
    pub counts: RemovalCounts,
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

fn alpha_ratio(text: &str) -> f64 {
    let mut total = 0usize;
    let mut alpha = 0usize;
    for c in text.chars() {
        total += 1;
        if c.is_alphabetic() {
            alpha += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        alpha as f64 / total as f64
    }
}

fn contains_url(text: &str) -> bool {
    let lower = text.to_lowercase();
    lower.contains("http://") || lower.contains("https://") || lower.contains("www.")
}

fn jaccard_words(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<&str> = words(a).collect();
    let sb: BTreeSet<&str> = words(b).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    inter as f64 / union as f64
}

/// First violated rule (1-based) for a node, or None when the node is clean.
/// Rule 1 (token count) only applies once a vocabulary is available.
fn first_violation(
    node: &MessageNode,
    parent_text: Option<&str>,
    config: &RuleConfig,
    vocab: Option<&Vocab>,
) -> Option<usize> {
    // 1: BPE token count out of [min_tokens, max_tokens]
    if let Some(v) = vocab {
        let n = v.encode(&node.text).len();
        if n > config.max_tokens || n < config.min_tokens {
            return Some(1);
        }
    }
    // 2: over-long word or over-long message
    if words(&node.text).any(|w| w.chars().count() > config.max_word_chars)
        || node.text.chars().count() > config.max_chars
    {
        return Some(2);
    }
    // 3: too few alphabetic characters
    if alpha_ratio(&node.text) < config.min_alpha_ratio {
        return Some(3);
    }
    // 4: URL
    if contains_url(&node.text) {
        return Some(4);
    }
    // 5: special strings
    if BUILTIN_SPECIAL_STRINGS
        .iter()
        .copied()
        .chain(config.extra_special_strings.iter().map(String::as_str))
        .any(|s| node.text.contains(s))
    {
        return Some(5);
    }
    // 6: high overlap with the parent's text
    if let Some(pt) = parent_text {
        if jaccard_words(&node.text, pt) > config.parent_overlap_jaccard {
            return Some(6);
        }
    }
    // 7: repeated too often corpus-wide
    if node.repeat_count > config.max_repeats {
        return Some(7);
    }
    // 8: offensive words, case-insensitive whole-token match
    if !config.offensive_words.is_empty() {
        let bad: BTreeSet<String> = config
            .offensive_words
            .iter()
            .map(|w| w.to_lowercase())
            .collect();
        if words(&node.text).any(|w| bad.contains(&w.to_lowercase())) {
            return Some(8);
        }
    }
    // 9: quarantined channel
    if node.quarantined {
        return Some(9);
    }
    // 10: known bot author
    if node.known_bot || config.known_bots.iter().any(|b| b == &node.author) {
        return Some(10);
    }
    None
}

/// Fills `repeat_count` on every node: the number of nodes across the whole
/// input sharing the exact same text.
pub fn annotate_repeats(tree: &mut MessageTree) {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for node in &tree.nodes {
        *counts.entry(node.text.as_str()).or_default() += 1;
    }
    let counts: BTreeMap<String, u64> = counts
        .into_iter()
        .map(|(k, v)| (String::from(k), v))
        .collect();
    for node in &mut tree.nodes {
        node.repeat_count = counts[&node.text];
    }
}

fn validate_structure(tree: &MessageTree) -> Result<BTreeMap<u64, usize>> {
    let mut index = BTreeMap::new();
    for (i, node) in tree.nodes.iter().enumerate() {
        if index.insert(node.id, i).is_some() {
            return Err(CoreError::malformed(alloc::format!(
                "duplicate node id {}",
                node.id
            )));
        }
    }
    for node in &tree.nodes {
        if let Some(pid) = node.parent_id {
            if !index.contains_key(&pid) {
                return Err(CoreError::malformed(alloc::format!(
                    "node {} references missing parent {}",
                    node.id,
                    pid
                )));
            }
        }
        // cycle detection: walking up must terminate within node count
        let mut cur = node.parent_id;
        let mut steps = 0usize;
        while let Some(pid) = cur {
            steps += 1;
            if steps > tree.nodes.len() {
                return Err(CoreError::malformed(alloc::format!(
                    "cyclic parent links at node {}",
                    node.id
                )));
            }
            cur = tree.nodes[index[&pid]].parent_id;
        }
    }
    Ok(index)
}

/// Applies the cleaning rules to a forest, removing each offending node
/// with its entire subtree. Pass a vocabulary to enable the token-count
/// rule (second pass of the pipeline).
pub fn clean_tree(
    tree: &MessageTree,
    config: &RuleConfig,
    vocab: Option<&Vocab>,
) -> Result<CleaningOutcome> {
    let index = validate_structure(tree)?;

    let violations: Vec<Option<usize>> = tree
        .nodes
        .iter()
        .map(|node| {
            let parent_text = node
                .parent_id
                .map(|pid| tree.nodes[index[&pid]].text.as_str());
            first_violation(node, parent_text, config, vocab)
        })
        .collect();

    // A node is removed iff it or any ancestor offends.
    let mut removed = alloc::vec![false; tree.nodes.len()];
    for i in 0..tree.nodes.len() {
        if violations[i].is_some() {
            removed[i] = true;
            continue;
        }
        let mut cur = tree.nodes[i].parent_id;
        while let Some(pid) = cur {
            let pi = index[&pid];
            if violations[pi].is_some() {
                removed[i] = true;
                break;
            }
            cur = tree.nodes[pi].parent_id;
        }
    }

    let mut counts = RemovalCounts::default();
    let mut surviving = Vec::new();
    for (i, node) in tree.nodes.iter().enumerate() {
        if removed[i] {
            match violations[i] {
                Some(rule) => counts.per_rule[rule - 1] += 1,
                None => counts.subtree += 1,
            }
        } else {
            surviving.push(node.clone());
        }
    }
    Ok(CleaningOutcome {
        tree: MessageTree { nodes: surviving },
        counts,
    })
}

/// One sample per surviving non-root node: the node is the response, its
/// ancestors (root first) are the context.
pub fn extract_pairs(tree: &MessageTree) -> Vec<RawSample> {
    let index: BTreeMap<u64, usize> = tree
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id, i))
        .collect();
    let mut samples = Vec::new();
    for node in &tree.nodes {
        if node.parent_id.is_none() {
            continue;
        }
        let mut context = Vec::new();
        let mut cur = node.parent_id;
        while let Some(pid) = cur {
            let pi = match index.get(&pid) {
                Some(&pi) => pi,
                // ancestor pruned away: the path is broken, skip the sample
                None => break,
            };
            context.push(tree.nodes[pi].text.clone());
            cur = tree.nodes[pi].parent_id;
        }
        if cur.is_some() {
            continue;
        }
        if context.is_empty() {
            continue;
        }
        context.reverse();
        samples.push(RawSample {
            context,
            response: node.text.clone(),
            ts: node.ts,
        });
    }
    samples
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::borrow::ToOwned;
    use alloc::string::ToString;
    use alloc::{format, vec};

    fn node(id: u64, parent: Option<u64>, text: &str) -> MessageNode {
        MessageNode {
            id,
            parent_id: parent,
            text: text.to_owned(),
            author: format!("user{id}"),
            ts: id,
            channel: "general".to_owned(),
            known_bot: false,
            quarantined: false,
            repeat_count: 1,
        }
    }

    fn cfg() -> RuleConfig {
        RuleConfig::default()
    }

    #[test]
    fn url_removed_under_rule_4() {
        let tree = MessageTree {
            nodes: vec![node(1, None, "check this out http://x.co for details")],
        };
        let out = clean_tree(&tree, &cfg(), None).unwrap();
        assert_eq!(out.counts.per_rule[3], 1);
        assert!(out.tree.nodes.is_empty());
    }

    #[test]
    fn overlong_message_removed_under_rule_2() {
        let mut text = String::new();
        while text.chars().count() <= 1024 {
            text.push_str("word ");
        }
        let tree = MessageTree {
            nodes: vec![node(1, None, &text)],
        };
        let out = clean_tree(&tree, &cfg(), None).unwrap();
        assert_eq!(out.counts.per_rule[1], 1);
    }

    #[test]
    fn low_alpha_ratio_removed_under_rule_3() {
        // 13 alphabetic of 20 chars = 65%
        let text = "abcdefghijklm 123456";
        assert!((alpha_ratio(text) - 0.65).abs() < 1e-12);
        let tree = MessageTree {
            nodes: vec![node(1, None, text)],
        };
        let out = clean_tree(&tree, &cfg(), None).unwrap();
        assert_eq!(out.counts.per_rule[2], 1);
    }

    #[test]
    fn offending_node_takes_its_subtree_along() {
        let tree = MessageTree {
            nodes: vec![
                node(1, None, "a perfectly ordinary root message"),
                node(2, Some(1), "spam spam see www.spam.example now"),
                node(3, Some(2), "an innocent reply to the spam"),
                node(4, Some(1), "another innocent reply kept alive"),
            ],
        };
        let out = clean_tree(&tree, &cfg(), None).unwrap();
        assert_eq!(out.counts.per_rule[3], 1);
        assert_eq!(out.counts.subtree, 1);
        assert_eq!(out.counts.total(), 2);
        let ids: Vec<u64> = out.tree.nodes.iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![1, 4]);
    }

    #[test]
    fn cleaning_is_idempotent() {
        let tree = MessageTree {
            nodes: vec![
                node(1, None, "a perfectly ordinary root message"),
                node(2, Some(1), "reply with r/brigading inside"),
                node(3, Some(1), "normal reply that stays around"),
                node(4, Some(3), "normal reply that stays around"), // dup of parent words
            ],
        };
        let once = clean_tree(&tree, &cfg(), None).unwrap();
        let twice = clean_tree(&once.tree, &cfg(), None).unwrap();
        assert_eq!(once.tree, twice.tree);
        assert_eq!(twice.counts.total(), 0);
    }

    #[test]
    fn parent_overlap_rule_fires_on_near_duplicates() {
        let tree = MessageTree {
            nodes: vec![
                node(1, None, "the quick brown fox jumps over dogs"),
                node(2, Some(1), "the quick brown fox jumps over dogs"),
            ],
        };
        let out = clean_tree(&tree, &cfg(), None).unwrap();
        assert_eq!(out.counts.per_rule[5], 1);
    }

    #[test]
    fn repeat_annotation_and_rule_7() {
        let mut nodes = vec![node(1, None, "a wholly unique root message here")];
        for i in 0..101 {
            nodes.push(node(100 + i, Some(1), "me too"));
        }
        let mut tree = MessageTree { nodes };
        annotate_repeats(&mut tree);
        assert_eq!(tree.nodes[1].repeat_count, 101);
        // "me too" also fails rule 3? 5 alpha of 6 chars = 83%, passes; rule 1
        // disabled without vocab.
        let out = clean_tree(&tree, &cfg(), None).unwrap();
        assert_eq!(out.counts.per_rule[6], 101);
        assert_eq!(out.tree.nodes.len(), 1);
    }

    #[test]
    fn bot_and_quarantine_flags() {
        let mut bot = node(2, Some(1), "i am a helpful automated reply");
        bot.known_bot = true;
        let mut quarantined = node(3, Some(1), "posted in a quarantined place");
        quarantined.quarantined = true;
        let tree = MessageTree {
            nodes: vec![node(1, None, "a perfectly ordinary root message"), bot, quarantined],
        };
        let out = clean_tree(&tree, &cfg(), None).unwrap();
        assert_eq!(out.counts.per_rule[9], 1);
        assert_eq!(out.counts.per_rule[8], 1);
    }

    #[test]
    fn offensive_list_matches_whole_tokens_case_insensitively() {
        let mut config = cfg();
        config.offensive_words = vec!["grond".to_string()];
        let tree = MessageTree {
            nodes: vec![
                node(1, None, "GROND they shouted loudly again"),
                node(2, None, "grondwater is just dutch for groundwater"),
            ],
        };
        let out = clean_tree(&tree, &config, None).unwrap();
        assert_eq!(out.counts.per_rule[7], 1);
        assert_eq!(out.tree.nodes.len(), 1);
    }

    #[test]
    fn cyclic_links_are_malformed() {
        let mut a = node(1, Some(2), "first of a cycle pair");
        a.ts = 0;
        let b = node(2, Some(1), "second of a cycle pair");
        let tree = MessageTree { nodes: vec![a, b] };
        assert!(matches!(
            clean_tree(&tree, &cfg(), None),
            Err(CoreError::MalformedInput(_))
        ));
    }

    #[test]
    fn extract_pairs_enumerates_root_paths() {
        let tree = MessageTree {
            nodes: vec![
                node(1, None, "A"),
                node(2, Some(1), "B"),
                node(3, Some(1), "C"),
                node(4, Some(2), "D"),
            ],
        };
        let samples = extract_pairs(&tree);
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].context, vec!["A".to_string()]);
        assert_eq!(samples[0].response, "B");
        assert_eq!(samples[1].context, vec!["A".to_string()]);
        assert_eq!(samples[1].response, "C");
        assert_eq!(samples[2].context, vec!["A".to_string(), "B".to_string()]);
        assert_eq!(samples[2].response, "D");
    }

    #[test]
    fn extract_pairs_depth_chain_and_lonely_root() {
        let chain = MessageTree {
            nodes: vec![
                node(1, None, "w"),
                node(2, Some(1), "x"),
                node(3, Some(2), "y"),
                node(4, Some(3), "z"),
            ],
        };
        let samples = extract_pairs(&chain);
        assert_eq!(samples.len(), 3);
        let lens: Vec<usize> = samples.iter().map(|s| s.context.len()).collect();
        assert_eq!(lens, vec![1, 2, 3]);

        let lonely = MessageTree {
            nodes: vec![node(1, None, "all alone")],
        };
        assert!(extract_pairs(&lonely).is_empty());
    }

    #[test]
    fn survivors_violate_no_rules_and_counts_balance() {
        let mut nodes = vec![node(1, None, "a root that should stay put")];
        nodes.push(node(2, Some(1), "http://gone.example"));
        nodes.push(node(3, Some(2), "child of removed parent"));
        nodes.push(node(4, Some(1), "fine reply that stays around"));
        nodes.push(node(5, Some(4), "1234567890 $$$"));
        let mut tree = MessageTree { nodes };
        annotate_repeats(&mut tree);
        let before = tree.nodes.len();
        let out = clean_tree(&tree, &cfg(), None).unwrap();
        assert_eq!(out.counts.total(), before - out.tree.nodes.len());
        // re-scan: no survivor violates anything
        let rescan = clean_tree(&out.tree, &cfg(), None).unwrap();
        assert_eq!(rescan.counts.total(), 0);
    }
}
