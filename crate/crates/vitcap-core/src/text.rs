//! Tokenizer, vocabulary, and concept label extraction.
//!
//! Captions are lowercased and split on anything non-alphanumeric, so the
//! tokenizer is trivially reversible up to punctuation. Vocabularies always
//! start with the five special tokens; content ids follow sorted by count
//! (descending) then token (ascending), which makes vocabulary files
//! reproducible from the same corpus.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

static STOPWORDS_RAW: &str = include_str!("../data/stopwords.txt");

/// Classic 127-word English stopword list, used by keyword-style concept
/// extraction to drop function words.
pub fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS_RAW.lines().filter(|l| !l.is_empty()).collect())
}

/// Lowercases and splits on non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                cur.push(lc);
            }
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    by_token: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const CLS: u32 = 2;
    pub const SEP: u32 = 3;
    pub const MASK: u32 = 4;

    /// Number of reserved ids at the front of every vocabulary.
    pub const SPECIALS: usize = SPECIAL_TOKENS.len();

    /// Builds a vocabulary from caption text. Tokens appearing fewer than
    /// `min_count` times are dropped.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, min_count: usize) -> Vocab {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for cap in captions {
            for tok in tokenize(cap) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t));
        Vocab::from_tokens_unchecked(tokens)
    }

    fn from_tokens_unchecked(tokens: Vec<String>) -> Vocab {
        let by_token = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, by_token }
    }

    /// Validates that the list starts with the special tokens and has no
    /// duplicates, then adopts it.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < Self::SPECIALS {
            return Err(Error::data(format!(
                "vocabulary needs at least {} entries, got {}",
                Self::SPECIALS,
                tokens.len()
            )));
        }
        for (i, expected) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(Error::data(format!(
                    "vocabulary slot {i} must be {expected}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut seen = HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab::from_tokens_unchecked(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.by_token.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::data(format!("token id {id} out of vocabulary range")))
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < Self::SPECIALS
    }

    /// Tokenizes and maps to ids; out-of-vocabulary tokens become `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(Self::UNK))
            .collect()
    }

    /// Joins tokens with spaces, skipping special ids.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if Self::is_special(id) {
                continue;
            }
            words.push(self.token(id)?);
        }
        Ok(words.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let body =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = body
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.to_string())
            .collect();
        Vocab::from_tokens(tokens)
    }

    /// SHA-256 over newline-joined tokens; checkpoints carry this so a
    /// model cannot silently be used with the wrong vocabulary.
    pub fn sha256_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.tokens.join("\n").as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// How concept labels are derived from reference captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptMode {
    /// Every in-vocabulary caption token is a positive label.
    AllTokens,
    /// Caption tokens minus stopwords.
    Keywords,
}

/// Sparse multi-hot label set over the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptLabelSet {
    vocab_size: usize,
    ids: Vec<u32>,
}

impl ConceptLabelSet {
    pub fn new(vocab_size: usize, mut ids: Vec<u32>) -> Result<ConceptLabelSet> {
        ids.sort_unstable();
        ids.dedup();
        if let Some(&max) = ids.last() {
            if max as usize >= vocab_size {
                return Err(Error::data(format!(
                    "label id {max} out of range for vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(ConceptLabelSet { vocab_size, ids })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    pub fn multi_hot(&self) -> Vec<bool> {
        let mut out = vec![false; self.vocab_size];
        for &id in &self.ids {
            out[id as usize] = true;
        }
        out
    }
}

/// Union of in-vocabulary tokens across all reference captions of one
/// image. Keyword mode additionally drops stopwords, so its label set is
/// always a subset of the all-tokens one.
pub fn concept_labels(
    captions: &[String],
    vocab: &Vocab,
    mode: ConceptMode,
) -> Result<ConceptLabelSet> {
    let mut ids = Vec::new();
    for cap in captions {
        for tok in tokenize(cap) {
            if mode == ConceptMode::Keywords && stopwords().contains(tok.as_str()) {
                continue;
            }
            if let Some(id) = vocab.id(&tok) {
                if !Vocab::is_special(id) {
                    ids.push(id);
                }
            }
        }
    }
    ConceptLabelSet::new(vocab.len(), ids)
}

pub const TAG_SCORE_THRESHOLD: f64 = 0.2;
pub const TAG_LIMIT: usize = 50;

/// Labels from an external tagger: keep tags scoring strictly above the
/// threshold, at most `limit` of them by descending score (ties broken by
/// token), then map to vocabulary ids.
pub fn labels_from_tags(
    tags: &[(String, f64)],
    vocab: &Vocab,
    threshold: f64,
    limit: usize,
) -> Result<ConceptLabelSet> {
    let mut kept: Vec<&(String, f64)> = tags.iter().filter(|(_, s)| *s > threshold).collect();
    kept.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    kept.truncate(limit);
    let ids: Vec<u32> = kept
        .iter()
        .filter_map(|(t, _)| vocab.id(t))
        .filter(|&id| !Vocab::is_special(id))
        .collect();
    ConceptLabelSet::new(vocab.len(), ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_strips_punctuation() {
        assert_eq!(
            tokenize("A red Circle, above a BLUE square!"),
            vec!["a", "red", "circle", "above", "a", "blue", "square"]
        );
        assert_eq!(tokenize("  "), Vec::<String>::new());
        assert_eq!(tokenize("it's"), vec!["it", "s"]);
    }

    #[test]
    fn build_orders_by_count_then_token() {
        let vocab = Vocab::build(["b a", "b c", "a"], 1);
        let tail: Vec<&str> = vocab.tokens()[Vocab::SPECIALS..]
            .iter()
            .map(|s| s.as_str())
            .collect();
        assert_eq!(tail, vec!["a", "b", "c"]);
    }

    #[test]
    fn min_count_filters_rare_tokens() {
        let vocab = Vocab::build(["dog dog cat"], 2);
        assert!(vocab.id("dog").is_some());
        assert!(vocab.id("cat").is_none());
        assert_eq!(vocab.encode("cat"), vec![Vocab::UNK]);
    }

    #[test]
    fn specials_occupy_fixed_slots() {
        let vocab = Vocab::build(["x"], 1);
        assert_eq!(vocab.id("[PAD]"), Some(0));
        assert_eq!(vocab.id("[UNK]"), Some(1));
        assert_eq!(vocab.id("[CLS]"), Some(2));
        assert_eq!(vocab.id("[SEP]"), Some(3));
        assert_eq!(vocab.id("[MASK]"), Some(4));
        let err = Vocab::from_tokens(vec!["[PAD]".into(), "x".into()]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn stopword_list_has_127_unique_lowercase_words() {
        let set = stopwords();
        assert_eq!(set.len(), 127);
        let lines: Vec<&str> = STOPWORDS_RAW.lines().filter(|l| !l.is_empty()).collect();
        assert_eq!(lines.len(), 127, "list contains a duplicate");
        for w in set {
            assert_eq!(*w, w.to_lowercase());
        }
        assert!(set.contains("the") && set.contains("above") && set.contains("now"));
    }

    #[test]
    fn keyword_labels_drop_stopwords() {
        let vocab = Vocab::build(["a red circle above a blue square"], 1);
        let caps = vec!["a red circle above a blue square".to_string()];
        let all = concept_labels(&caps, &vocab, ConceptMode::AllTokens).unwrap();
        let kw = concept_labels(&caps, &vocab, ConceptMode::Keywords).unwrap();
        assert!(kw.len() < all.len());
        for id in kw.ids() {
            assert!(all.contains(*id));
        }
        assert!(!kw.contains(vocab.id("a").unwrap()));
        assert!(kw.contains(vocab.id("red").unwrap()));
    }

    #[test]
    fn tag_labels_respect_threshold_and_limit() {
        let vocab = Vocab::build(["dog cat bird fish"], 1);
        let tags = vec![
            ("dog".to_string(), 0.9),
            ("cat".to_string(), 0.21),
            ("bird".to_string(), 0.2),
            ("fish".to_string(), 0.05),
        ];
        let labels = labels_from_tags(&tags, &vocab, TAG_SCORE_THRESHOLD, TAG_LIMIT).unwrap();
        assert!(labels.contains(vocab.id("dog").unwrap()));
        assert!(labels.contains(vocab.id("cat").unwrap()));
        assert!(!labels.contains(vocab.id("bird").unwrap()), "0.2 is not > 0.2");
        assert!(!labels.contains(vocab.id("fish").unwrap()));

        let many: Vec<(String, f64)> = (0..60).map(|i| (format!("w{i}"), 0.5)).collect();
        let wide = Vocab::build([many.iter().map(|(t, _)| t.clone()).collect::<Vec<_>>().join(" ").as_str()], 1);
        let capped = labels_from_tags(&many, &wide, TAG_SCORE_THRESHOLD, TAG_LIMIT).unwrap();
        assert_eq!(capped.len(), TAG_LIMIT);
    }

    #[test]
    fn vocab_hash_tracks_content() {
        let a = Vocab::build(["dog"], 1);
        let b = Vocab::build(["cat"], 1);
        assert_ne!(a.sha256_hex(), b.sha256_hex());
        assert_eq!(a.sha256_hex(), Vocab::build(["dog"], 1).sha256_hex());
    }
}
