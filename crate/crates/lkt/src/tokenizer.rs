//! Word-level vocabulary with the reserved special tokens used by the
//! sequence format: `[PAD] [CLS] [EOS] [MASK] [UNK] [CORRECT] [INCORRECT]`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const CORRECT: u32 = 5;
pub const INCORRECT: u32 = 6;

pub const RESERVED_TOKENS: [&str; 7] = [
    "[PAD]",
    "[CLS]",
    "[EOS]",
    "[MASK]",
    "[UNK]",
    "[CORRECT]",
    "[INCORRECT]",
];

/// Special tokens recognized verbatim in input text. `[PAD]` is excluded:
/// encode never emits it, padding is added only by batching.
const ATOMIC_IN_TEXT: [&str; 6] = ["[CLS]", "[EOS]", "[MASK]", "[UNK]", "[CORRECT]", "[INCORRECT]"];

/// Token ↔ id map with dense ids `0..len`. Immutable after build.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Split raw text into word-level tokens: whitespace separated, lowercased,
/// punctuation marks split into their own tokens. Bracketed special tokens
/// are kept atomic.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        if ATOMIC_IN_TEXT.contains(&piece) {
            out.push(piece.to_string());
            continue;
        }
        let lowered = piece.to_lowercase();
        let chars: Vec<char> = lowered.chars().collect();
        let mut word = String::new();
        for (i, &ch) in chars.iter().enumerate() {
            // hyphens joining alphanumerics stay word-internal
            let internal_hyphen = ch == '-'
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|c| c.is_alphanumeric());
            if ch.is_alphanumeric() || internal_hyphen {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

impl Vocabulary {
    /// Build from a corpus of text lines: keep the `max_size - 7` most
    /// frequent tokens with frequency ≥ `min_freq`, ties broken
    /// lexicographically, reserved tokens prepended.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        min_freq: usize,
        max_size: usize,
    ) -> Result<Self> {
        if min_freq < 1 {
            return Err(Error::InvalidArgument(format!(
                "min_freq must be ≥ 1, got {min_freq}"
            )));
        }
        if max_size <= RESERVED_TOKENS.len() {
            return Err(Error::InvalidArgument(format!(
                "max_size must exceed the {} reserved tokens, got {max_size}",
                RESERVED_TOKENS.len()
            )));
        }

        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in tokenize(line) {
                if RESERVED_TOKENS.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            log::warn!("vocabulary built from empty corpus: reserved tokens only");
        }

        let mut candidates: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .collect();
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        candidates.truncate(max_size - RESERVED_TOKENS.len());

        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(candidates.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at minimum the reserved tokens are present
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfRange {
                index: id as usize,
                bound: self.tokens.len(),
            })
    }

    /// Encode text to ids; unknown tokens map to `[UNK]`. Never emits `[PAD]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    /// Decode ids to tokens joined by single spaces.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            parts.push(self.token(id)?);
        }
        Ok(parts.join(" "))
    }

    /// One token per line, line number = id; the first 7 lines are the
    /// reserved tokens in order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for line in reader.lines() {
            tokens.push(line?);
        }
        while tokens.last().is_some_and(|t| t.is_empty()) {
            tokens.pop();
        }
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err(Error::DataValidation(format!(
                "vocab file {} has fewer than {} lines",
                path.display(),
                RESERVED_TOKENS.len()
            )));
        }
        for (i, expect) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *expect {
                return Err(Error::DataValidation(format!(
                    "vocab file {}: line {} must be {expect}, found {}",
                    path.display(),
                    i + 1,
                    tokens[i]
                )));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_counts_frequencies() {
        let v = Vocabulary::build(["a a b"], 1, 100).unwrap();
        assert_eq!(v.id_of("a"), Some(7));
        assert_eq!(v.id_of("b"), Some(8));
        assert_eq!(v.len(), 9);
    }

    #[test]
    fn build_splits_punctuation() {
        let v = Vocabulary::build(["x? x"], 1, 100).unwrap();
        assert!(v.id_of("x").is_some());
        assert!(v.id_of("?").is_some());
        assert!(v.id_of("x?").is_none());
    }

    #[test]
    fn build_breaks_frequency_ties_lexicographically() {
        // both appear once; only one slot beyond the reserved tokens
        let v = Vocabulary::build(["cat ant"], 1, 8).unwrap();
        assert_eq!(v.id_of("ant"), Some(7));
        assert_eq!(v.id_of("cat"), None);
    }

    #[test]
    fn build_empty_corpus_is_reserved_only() {
        let v = Vocabulary::build([], 1, 100).unwrap();
        assert_eq!(v.len(), RESERVED_TOKENS.len());
    }

    #[test]
    fn build_rejects_bad_args() {
        assert!(Vocabulary::build(["a"], 0, 100).is_err());
        assert!(Vocabulary::build(["a"], 1, 7).is_err());
    }

    #[test]
    fn encode_specials_and_unknown() {
        let v = Vocabulary::build(["a"], 1, 100).unwrap();
        assert_eq!(v.encode("[CLS]"), vec![CLS]);
        assert_eq!(v.encode("zzzz-never-seen"), vec![UNK]);
        assert_eq!(v.encode("[CORRECT] [MASK]"), vec![CORRECT, MASK]);
    }

    #[test]
    fn decode_and_round_trip() {
        let v = Vocabulary::build(["set of odd"], 1, 100).unwrap();
        assert_eq!(v.decode(&[CLS, EOS]).unwrap(), "[CLS] [EOS]");
        let text = "set of odd";
        assert_eq!(v.decode(&v.encode(text)).unwrap(), text);
    }

    #[test]
    fn decode_out_of_range() {
        let v = Vocabulary::build(["a"], 1, 100).unwrap();
        assert!(v.decode(&[9999]).is_err());
    }

    #[test]
    fn encode_never_emits_pad() {
        let v = Vocabulary::build(["pad [PAD] pad"], 1, 100).unwrap();
        let ids = v.encode("[PAD] pad");
        assert!(!ids.contains(&PAD));
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("v1.txt");
        let p2 = dir.path().join("v2.txt");
        let v = Vocabulary::build(["some words ? here"], 1, 100).unwrap();
        v.save(&p1).unwrap();
        let v2 = Vocabulary::load(&p1).unwrap();
        v2.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(v.len(), v2.len());
    }

    #[test]
    fn vocab_build_is_deterministic() {
        let corpus = ["b a", "c b a", "d c b a"];
        let v1 = Vocabulary::build(corpus, 1, 9).unwrap();
        let v2 = Vocabulary::build(corpus, 1, 9).unwrap();
        assert_eq!(v1.tokens, v2.tokens);
        // a and b both have the top frequencies
        assert_eq!(v1.id_of("a"), Some(7));
        assert_eq!(v1.id_of("b"), Some(8));
    }
}
