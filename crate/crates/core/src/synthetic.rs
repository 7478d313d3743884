//! A deterministic token-mapping language for end-to-end checks.
//!
//! Plain source symbols translate to one target word each. Ambiguous
//! symbols translate to one of two words sharing a two-letter prefix,
//! chosen by the parity of the neighboring source symbol (the right
//! neighbor, or the left one at the end of the sentence). Translation is
//! word by word, so target position `j` aligns to source position `j`.
//!
//! Within a sentence no two target words share an initial letter. Simulated
//! contexts need not be adjacent to the gold word, so without this the typed
//! characters could not tell apart two gap positions and the task would not
//! be fully learnable.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{simulate_dataset, stream_rng, SentencePair, SimulatedInstance, SimulationConfig};
use crate::error::Result;
use crate::evaluation::AlignmentAnnotation;

const LETTERS: &[u8] = b"bcdfghjklmnprstvwxyz";
const VOWELS: &[u8] = b"aeiou";
const CONSONANTS: &[u8] = b"bcdfghklmnprstvz";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub plain_symbols: usize,
    pub ambiguous_symbols: usize,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a sentence position draws from the ambiguous set.
    pub ambiguous_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            plain_symbols: 80,
            ambiguous_symbols: 20,
            train_pairs: 5000,
            heldout_pairs: 500,
            min_len: 5,
            max_len: 12,
            ambiguous_rate: 0.2,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    /// Plain symbols first, then ambiguous ones.
    pub symbols: Vec<String>,
    pub plain: Vec<String>,
    /// `ambiguous[i]` holds the translations of symbol `plain.len() + i`
    /// for an even and an odd neighbor.
    pub ambiguous: Vec<[String; 2]>,
}

fn syllables<R: Rng + ?Sized>(rng: &mut R, len: usize) -> String {
    (0..len)
        .map(|i| {
            let set = if i % 2 == 0 { VOWELS } else { CONSONANTS };
            set[rng.gen_range(0..set.len())] as char
        })
        .collect()
}

impl SyntheticLanguage {
    pub fn generate(spec: &SyntheticSpec) -> Self {
        let mut rng = stream_rng(spec.seed, 0);
        let units = spec.plain_symbols + spec.ambiguous_symbols;
        let mut used = HashSet::new();
        let mut prefixes = HashSet::new();
        let mut fresh = |rng: &mut rand_chacha::ChaCha8Rng, head: &str, len: usize| loop {
            let w = format!("{head}{}", syllables(rng, len - head.chars().count()));
            if used.insert(w.clone()) {
                return w;
            }
        };
        let symbols: Vec<String> = (0..units).map(|i| format!("s{i:02}")).collect();
        let mut plain = Vec::with_capacity(spec.plain_symbols);
        let mut ambiguous = Vec::with_capacity(spec.ambiguous_symbols);
        for u in 0..units {
            let letter = (LETTERS[u % LETTERS.len()] as char).to_string();
            if u < spec.plain_symbols {
                let len = rng.gen_range(4..=7);
                plain.push(fresh(&mut rng, &letter, len));
            } else {
                let prefix = loop {
                    let p = format!("{letter}{}", VOWELS[rng.gen_range(0..VOWELS.len())] as char);
                    if prefixes.insert(p.clone()) {
                        break p;
                    }
                };
                let (la, lb) = (rng.gen_range(4..=7), rng.gen_range(4..=7));
                let a = fresh(&mut rng, &prefix, la);
                let b = fresh(&mut rng, &prefix, lb);
                ambiguous.push([a, b]);
            }
        }
        SyntheticLanguage {
            symbols,
            plain,
            ambiguous,
        }
    }

    fn index_of(&self, symbol: &str) -> Option<usize> {
        symbol.strip_prefix('s')?.parse().ok().filter(|&i| i < self.symbols.len())
    }

    pub fn is_ambiguous(&self, symbol: &str) -> bool {
        self.index_of(symbol).is_some_and(|i| i >= self.plain.len())
    }

    fn initial(&self, index: usize) -> char {
        match index.checked_sub(self.plain.len()) {
            None => self.plain[index].chars().next().unwrap(),
            Some(a) => self.ambiguous[a][0].chars().next().unwrap(),
        }
    }

    /// The reference translation. Panics on symbols outside the language.
    pub fn translate(&self, source: &[String]) -> Vec<String> {
        let idx: Vec<usize> = source
            .iter()
            .map(|s| self.index_of(s).unwrap_or_else(|| panic!("unknown symbol {s}")))
            .collect();
        (0..idx.len())
            .map(|j| match idx[j].checked_sub(self.plain.len()) {
                None => self.plain[idx[j]].clone(),
                Some(a) => {
                    let neighbor = if j + 1 < idx.len() { idx[j + 1] } else { idx[j - 1] };
                    self.ambiguous[a][neighbor % 2].clone()
                }
            })
            .collect()
    }

    /// Samples a sentence whose translations start with distinct letters.
    pub fn sample_sentence<R: Rng + ?Sized>(&self, spec: &SyntheticSpec, rng: &mut R) -> SentencePair {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut initials = BTreeSet::new();
        let mut source = Vec::with_capacity(len);
        while source.len() < len {
            let pool = if !self.ambiguous.is_empty() && rng.gen_bool(spec.ambiguous_rate) {
                self.plain.len()..self.symbols.len()
            } else {
                0..self.plain.len()
            };
            let free: Vec<usize> = pool.filter(|&i| !initials.contains(&self.initial(i))).collect();
            let Some(&pick) = free.choose(rng) else {
                continue;
            };
            initials.insert(self.initial(pick));
            source.push(self.symbols[pick].clone());
        }
        let target = self.translate(&source);
        SentencePair::new(source, target).expect("non-empty sentence")
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub language: SyntheticLanguage,
    pub train: Vec<SentencePair>,
    pub heldout: Vec<SentencePair>,
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.min_len >= 2 && spec.min_len <= spec.max_len, "sentence lengths");
    assert!(spec.max_len <= LETTERS.len(), "at most one word per initial letter");
    let language = SyntheticLanguage::generate(spec);
    let mut train_rng = stream_rng(spec.seed, 1);
    let mut heldout_rng = stream_rng(spec.seed, 2);
    let train = (0..spec.train_pairs)
        .map(|_| language.sample_sentence(spec, &mut train_rng))
        .collect();
    let heldout = (0..spec.heldout_pairs)
        .map(|_| language.sample_sentence(spec, &mut heldout_rng))
        .collect();
    SyntheticCorpus {
        language,
        train,
        heldout,
    }
}

/// Simulated instances over `pairs` with their alignment annotations: the
/// gold word at target position `j` aligns to source position `j`.
pub fn simulate_annotated(
    pairs: &[SentencePair],
    config: &SimulationConfig,
) -> Result<(Vec<SimulatedInstance>, Vec<AlignmentAnnotation>)> {
    let sims = simulate_dataset(pairs, None, config)?;
    let annotations = sims
        .iter()
        .enumerate()
        .map(|(index, s)| AlignmentAnnotation {
            index,
            source_positions: BTreeSet::from([s.gold_pos]),
        })
        .collect();
    Ok((sims, annotations))
}

/// Instances whose gold word translates an ambiguous symbol.
pub fn ambiguity_subset<'a>(language: &SyntheticLanguage, sims: &'a [SimulatedInstance]) -> Vec<&'a SimulatedInstance> {
    sims.iter()
        .filter(|s| language.is_ambiguous(&s.instance.source[s.gold_pos]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_pairs: 200,
            heldout_pairs: 50,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn language_shape() {
        let lang = SyntheticLanguage::generate(&SyntheticSpec::default());
        assert_eq!(lang.symbols.len(), 100);
        assert_eq!(lang.plain.len(), 80);
        assert_eq!(lang.ambiguous.len(), 20);
        let mut all: Vec<&String> = lang.plain.iter().chain(lang.ambiguous.iter().flatten()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n, "target words are distinct");
        for [a, b] in &lang.ambiguous {
            assert_eq!(a[..2], b[..2]);
        }
    }

    #[test]
    fn disambiguation_follows_neighbor_parity() {
        let lang = SyntheticLanguage::generate(&SyntheticSpec::default());
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let t = lang.translate(&s(&["s80", "s02", "s80", "s03", "s81"]));
        assert_eq!(t[0], lang.ambiguous[0][0]);
        assert_eq!(t[2], lang.ambiguous[0][1]);
        // last position looks left: s03 is odd
        assert_eq!(t[4], lang.ambiguous[1][1]);
        assert_eq!(t[1], lang.plain[2]);
    }

    #[test]
    fn sentences_respect_lengths_and_initials() {
        let spec = small();
        let corpus = generate(&spec);
        assert_eq!(corpus.train.len(), 200);
        assert_eq!(corpus.heldout.len(), 50);
        for p in corpus.train.iter().chain(&corpus.heldout) {
            assert!((5..=12).contains(&p.source.len()));
            assert_eq!(p.source.len(), p.target.len());
            let initials: BTreeSet<char> = p.target.iter().map(|w| w.chars().next().unwrap()).collect();
            assert_eq!(initials.len(), p.target.len());
            assert_eq!(corpus.language.translate(&p.source), p.target);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small());
        let b = generate(&small());
        assert_eq!(a.train, b.train);
        assert_eq!(a.language, b.language);
    }

    #[test]
    fn annotations_point_at_the_translated_symbol() {
        let corpus = generate(&small());
        let config = SimulationConfig::uniform_general(300, 5);
        let (sims, ann) = simulate_annotated(&corpus.heldout, &config).unwrap();
        assert_eq!(sims.len(), ann.len());
        for (s, a) in sims.iter().zip(&ann) {
            let j = *a.source_positions.iter().next().unwrap();
            let pair = &corpus.heldout[s.pair_index];
            assert_eq!(corpus.language.translate(&pair.source)[j], s.instance.gold);
        }
        let amb = ambiguity_subset(&corpus.language, &sims);
        assert!(!amb.is_empty() && amb.len() < sims.len());
    }
}
