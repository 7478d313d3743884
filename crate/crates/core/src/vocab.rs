//! Word vocabularies with a fixed block of special tokens.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SentencePair;
use crate::error::{Result, WlacError};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";

/// Special tokens, in id order. They always occupy ids `0..SPECIALS.len()`.
pub const SPECIALS: [&str; 5] = [PAD, UNK, MASK, BOS, EOS];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const BOS_ID: u32 = 3;
pub const EOS_ID: u32 = 4;
pub const NUM_SPECIALS: usize = SPECIALS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabLine {
    id: u32,
    word: String,
}

impl Vocabulary {
    /// Builds a vocabulary from non-special words; specials are prepended.
    /// Duplicate words and words colliding with specials are dropped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for s in SPECIALS {
            vocab.push(s.to_string());
        }
        for w in words {
            vocab.push(w.into());
        }
        vocab
    }

    fn push(&mut self, word: String) {
        if self.ids.contains_key(&word) {
            return;
        }
        self.ids.insert(word.clone(), self.words.len() as u32);
        self.words.push(word);
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    /// Maps a word to its id, falling back to `[UNK]`.
    pub fn lookup(&self, word: &str) -> u32 {
        self.id_of(word).unwrap_or(UNK_ID)
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Non-special entries as `(id, word)`.
    pub fn regular_words(&self) -> impl Iterator<Item = (u32, &str)> {
        self.words
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS)
            .map(|(i, w)| (i as u32, w.as_str()))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.lookup(t.as_ref())).collect()
    }

    /// SHA-256 over the id-ordered word list, hex encoded.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for w in &self.words {
            hasher.update(w.as_bytes());
            hasher.update(b"\n");
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| WlacError::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (id, word) in self.words.iter().enumerate() {
            let line = serde_json::to_string(&VocabLine {
                id: id as u32,
                word: word.clone(),
            })?;
            writeln!(out, "{line}").map_err(|e| WlacError::io(path, e))?;
        }
        out.flush().map_err(|e| WlacError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| WlacError::io(path, e))?;
        let mut words = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| WlacError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: VocabLine = serde_json::from_str(&line).map_err(|e| WlacError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if entry.id as usize != words.len() {
                return Err(WlacError::Parse {
                    line: i + 1,
                    message: format!("expected id {}, found {}", words.len(), entry.id),
                });
            }
            words.push(entry.word);
        }
        Self::from_word_list(words)
    }

    /// Rebuilds a vocabulary from a full id-ordered list (specials included).
    pub fn from_word_list(words: Vec<String>) -> Result<Self> {
        if words.len() < NUM_SPECIALS || words[..NUM_SPECIALS] != SPECIALS {
            return Err(WlacError::InvalidArgument(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let vocab = Self::from_words(words.into_iter().skip(NUM_SPECIALS));
        Ok(vocab)
    }
}

/// Counts words on one side of the corpus and keeps the most frequent ones.
///
/// Specials come first, then words by descending frequency with ties broken
/// lexicographically, until `max_size` entries or the `min_freq` cutoff.
pub fn build_vocabulary(
    pairs: &[SentencePair],
    side: Side,
    max_size: usize,
    min_freq: usize,
) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for pair in pairs {
        let tokens = match side {
            Side::Source => &pair.source,
            Side::Target => &pair.target,
        };
        for t in tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq.max(1) && !SPECIALS.contains(w))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let room = max_size.saturating_sub(NUM_SPECIALS);
    Vocabulary::from_words(ranked.into_iter().take(room).map(|(w, _)| w.to_string()))
}

/// Training-corpus frequency of every word on one side.
pub fn word_counts(pairs: &[SentencePair], side: Side) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for pair in pairs {
        let tokens = match side {
            Side::Source => &pair.source,
            Side::Target => &pair.target,
        };
        for t in tokens {
            *counts.entry(t.clone()).or_default() += 1;
        }
    }
    counts
}
