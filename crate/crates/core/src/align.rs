//! Word-level alignment between an original prompt and its edited version.
//!
//! Prompts are split into words on whitespace with punctuation removed; each
//! word is then handed to the active backend's [`Vocabulary`] for sub-token
//! ids. Alignment runs a longest-common-subsequence over the lower-cased
//! words. Inside each gap between matched words, an equal-length gap is read
//! as positional substitutions; otherwise the gap's target words are
//! insertions and its source words deletions. Insertions and substitutions
//! together form the key-word set.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{Error, Result};

/// Maximum context length, counting the start and end markers.
pub const MAX_TOKENS: usize = 77;

/// Token id source for a backend.
pub trait Vocabulary {
    /// Token ids for a single (already punctuation-stripped) word.
    fn encode_word(&self, word: &str) -> Vec<u32>;

    fn bos(&self) -> Option<u32>;

    fn eos(&self) -> Option<u32>;

    fn pad(&self) -> u32;

    fn context_len(&self) -> usize {
        MAX_TOKENS
    }
}

/// One token per word, with start/end markers. Used when the real tokenizer
/// lives on the far side of a connection.
#[derive(Debug, Clone, Default)]
pub struct WordVocab;

impl Vocabulary for WordVocab {
    fn encode_word(&self, word: &str) -> Vec<u32> {
        vec![fnv1a(word.as_bytes()) % 49_000 + 1]
    }

    fn bos(&self) -> Option<u32> {
        Some(49_406)
    }

    fn eos(&self) -> Option<u32> {
        Some(49_407)
    }

    fn pad(&self) -> u32 {
        49_407
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub text: String,
    pub words: Vec<String>,
    /// Ids for the start marker, the words' sub-tokens and the end marker.
    /// Padding up to the context length is implicit.
    pub token_ids: Vec<u32>,
    /// Token positions of each word; disjoint and ordered.
    pub word_spans: Vec<Range<usize>>,
}

impl TokenizedPrompt {
    /// Number of non-padding token positions.
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Index of the word owning token position `pos`, if any.
    pub fn word_at(&self, pos: usize) -> Option<usize> {
        self.word_spans.iter().position(|s| s.contains(&pos))
    }

    /// Ids padded out to `context_len`.
    pub fn padded_ids(&self, context_len: usize, pad: u32) -> Vec<u32> {
        let mut ids = self.token_ids.clone();
        ids.resize(context_len.max(ids.len()), pad);
        ids
    }

    /// Position right after the last word token.
    pub fn content_end(&self) -> usize {
        self.word_spans.last().map_or(0, |s| s.end)
    }

    pub fn content_start(&self) -> usize {
        self.word_spans.first().map_or(0, |s| s.start)
    }
}

/// Splits a prompt into comparison words: whitespace separated, with
/// non-alphanumeric characters removed.
pub fn split_words(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn tokenize(prompt: &str, vocab: &dyn Vocabulary) -> Result<TokenizedPrompt> {
    let words = split_words(prompt);
    if words.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mut token_ids = Vec::new();
    token_ids.extend(vocab.bos());
    let mut word_spans = Vec::with_capacity(words.len());
    for w in &words {
        let ids = vocab.encode_word(w);
        let start = token_ids.len();
        token_ids.extend(ids);
        word_spans.push(start..token_ids.len());
    }
    token_ids.extend(vocab.eos());
    let limit = vocab.context_len().min(MAX_TOKENS);
    if token_ids.len() > limit {
        return Err(Error::Length {
            tokens: token_ids.len(),
            limit,
        });
    }
    Ok(TokenizedPrompt {
        text: prompt.trim().to_string(),
        words,
        token_ids,
        word_spans,
    })
}

/// How a target word relates to the source prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordMatch {
    /// Same word (case-insensitive) at source index.
    Kept(usize),
    /// Replaced in place; source index of the word it replaces.
    Substituted(usize),
    /// New word with no source counterpart.
    Inserted,
}

impl WordMatch {
    pub fn source(self) -> Option<usize> {
        match self {
            WordMatch::Kept(i) | WordMatch::Substituted(i) => Some(i),
            WordMatch::Inserted => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    /// One entry per target word.
    pub pairs: Vec<WordMatch>,
    pub key_set: BTreeSet<usize>,
    /// Source words without a target counterpart.
    pub dropped: Vec<usize>,
}

impl AlignmentMap {
    pub fn source_of(&self, target_word: usize) -> Option<usize> {
        self.pairs.get(target_word).and_then(|m| m.source())
    }

    pub fn is_key(&self, target_word: usize) -> bool {
        self.key_set.contains(&target_word)
    }

    pub fn is_noop(&self) -> bool {
        self.key_set.is_empty()
    }

    pub fn insertions(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs
            .iter()
            .enumerate()
            .filter(|(_, m)| matches!(m, WordMatch::Inserted))
            .map(|(i, _)| i)
    }
}

pub fn align(c: &TokenizedPrompt, c_star: &TokenizedPrompt) -> AlignmentMap {
    let src: Vec<String> = c.words.iter().map(|w| w.to_lowercase()).collect();
    let tgt: Vec<String> = c_star.words.iter().map(|w| w.to_lowercase()).collect();
    let matches = lcs_pairs(&src, &tgt);

    let mut pairs = vec![WordMatch::Inserted; tgt.len()];
    let mut dropped = Vec::new();
    let mut key_set = BTreeSet::new();

    let mut prev = (0usize, 0usize);
    let sentinel = (src.len(), tgt.len());
    for &(si, ti) in matches.iter().chain(std::iter::once(&sentinel)) {
        let src_gap = prev.0..si;
        let tgt_gap = prev.1..ti;
        if src_gap.len() == tgt_gap.len() {
            for (s, t) in src_gap.zip(tgt_gap) {
                pairs[t] = WordMatch::Substituted(s);
                key_set.insert(t);
            }
        } else {
            for t in tgt_gap {
                key_set.insert(t);
            }
            dropped.extend(src_gap);
        }
        if (si, ti) != sentinel {
            pairs[ti] = WordMatch::Kept(si);
        }
        prev = (si + 1, ti + 1);
    }

    AlignmentMap {
        pairs,
        key_set,
        dropped,
    }
}

/// Matched index pairs of a longest common subsequence, in order.
fn lcs_pairs(a: &[String], b: &[String]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    // suffix table: len[i][j] = LCS of a[i..], b[j..]
    let mut len = vec![vec![0u16; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            len[i][j] = if a[i] == b[j] {
                len[i + 1][j + 1] + 1
            } else {
                len[i + 1][j].max(len[i][j + 1])
            };
        }
    }
    let mut out = Vec::with_capacity(usize::from(len[0][0]));
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            out.push((i, j));
            i += 1;
            j += 1;
        } else if len[i + 1][j] >= len[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Token positions covered by the key words of `c_star`.
pub fn key_word_token_positions(a: &AlignmentMap, c_star: &TokenizedPrompt) -> BTreeSet<usize> {
    a.key_set
        .iter()
        .filter_map(|&w| c_star.word_spans.get(w))
        .flat_map(|s| s.clone())
        .collect()
}
