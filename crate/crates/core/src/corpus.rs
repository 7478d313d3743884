//! Parallel-corpus ingestion and simulation of autocompletion instances.
//!
//! An instance hides one target word, keeps a (possibly empty) span of target
//! words on either side as translation context, and reveals a short typed
//! prefix of the hidden word.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WlacError};
use crate::vocab::{Side, Vocabulary, SPECIALS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl SentencePair {
    pub fn new(source: Vec<String>, target: Vec<String>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(WlacError::InvalidArgument(
                "sentence pair sides must be non-empty".into(),
            ));
        }
        if source
            .iter()
            .chain(target.iter())
            .any(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(WlacError::InvalidArgument(
                "tokens must be non-empty and contain no whitespace".into(),
            ));
        }
        Ok(SentencePair { source, target })
    }

    pub fn from_text(source: &str, target: &str) -> Result<Self> {
        Self::new(tokenize(source), tokenize(target))
    }

    pub fn side(&self, side: Side) -> &[String] {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub pairs: Vec<SentencePair>,
    /// Lines dropped because one side was empty.
    pub skipped: usize,
}

/// Reads `source<TAB>target` lines. Lines with an empty side are skipped and
/// counted; a line without a TAB is a parse error.
pub fn load_parallel_corpus(path: &Path, limit: Option<usize>) -> Result<LoadedCorpus> {
    let file = File::open(path).map_err(|e| WlacError::io(path, e))?;
    let mut corpus = LoadedCorpus::default();
    let limit = limit.unwrap_or(usize::MAX);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        if corpus.pairs.len() >= limit {
            break;
        }
        let line = line.map_err(|e| WlacError::io(path, e))?;
        let Some((src, tgt)) = line.split_once('\t') else {
            return Err(WlacError::Parse {
                line: i + 1,
                message: "missing TAB separator".into(),
            });
        };
        let (src, tgt) = (tokenize(src), tokenize(tgt));
        if src.is_empty() || tgt.is_empty() {
            corpus.skipped += 1;
            continue;
        }
        corpus.pairs.push(SentencePair {
            source: src,
            target: tgt,
        });
    }
    Ok(corpus)
}

pub fn save_parallel_corpus(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    let file = File::create(path).map_err(|e| WlacError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in pairs {
        writeln!(out, "{}\t{}", p.source.join(" "), p.target.join(" "))
            .map_err(|e| WlacError::io(path, e))?;
    }
    out.flush().map_err(|e| WlacError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextType {
    ZeroContext,
    Prefix,
    Suffix,
    BiContext,
    PrefixDecoding,
    PostEditing,
}

impl ContextType {
    pub const ALL: [ContextType; 6] = [
        ContextType::ZeroContext,
        ContextType::Prefix,
        ContextType::Suffix,
        ContextType::BiContext,
        ContextType::PrefixDecoding,
        ContextType::PostEditing,
    ];

    /// The four general context types averaged into overall accuracy.
    pub const GENERAL: [ContextType; 4] = [
        ContextType::ZeroContext,
        ContextType::Prefix,
        ContextType::Suffix,
        ContextType::BiContext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContextType::ZeroContext => "zero_context",
            ContextType::Prefix => "prefix",
            ContextType::Suffix => "suffix",
            ContextType::BiContext => "bi_context",
            ContextType::PrefixDecoding => "prefix_decoding",
            ContextType::PostEditing => "post_editing",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|c| {
            c.name() == s
                || matches!(
                    (c, s.as_str()),
                    (ContextType::ZeroContext, "zero")
                        | (ContextType::BiContext, "bi")
                        | (ContextType::PostEditing, "pe")
                )
        })
    }

    fn needs_left(self) -> bool {
        matches!(
            self,
            ContextType::Prefix
                | ContextType::BiContext
                | ContextType::PrefixDecoding
                | ContextType::PostEditing
        )
    }

    fn needs_right(self) -> bool {
        matches!(
            self,
            ContextType::Suffix | ContextType::BiContext | ContextType::PostEditing
        )
    }

    /// Whether the emptiness rules of this type allow the given contexts.
    pub fn admits(self, left_len: usize, right_len: usize) -> bool {
        let left_ok = if self.needs_left() { left_len > 0 } else { left_len == 0 };
        let right_ok = if self.needs_right() { right_len > 0 } else { right_len == 0 };
        left_ok && right_ok
    }
}

impl std::fmt::Display for ContextType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WlacInstance {
    pub source: Vec<String>,
    pub left_ctx: Vec<String>,
    pub right_ctx: Vec<String>,
    pub typed: String,
    pub gold: String,
    pub ctype: ContextType,
}

/// A simulated instance together with where its gold word came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulatedInstance {
    pub instance: WlacInstance,
    pub pair_index: usize,
    /// Position of the gold occurrence in the target sentence.
    pub gold_pos: usize,
}

fn is_eligible_gold(word: &str, vocab: Option<&Vocabulary>) -> bool {
    word.chars().count() >= 2
        && !word.chars().all(|c| c.is_ascii_punctuation() || !c.is_alphanumeric())
        && !SPECIALS.contains(&word)
        && vocab.map_or(true, |v| v.contains(word))
}

/// Typed length: geometric(0.5) on 1, 2, ... conditioned to `[1, max]`.
fn sample_typed_len<R: Rng + ?Sized>(max: usize, rng: &mut R) -> usize {
    debug_assert!(max >= 1);
    let weights: Vec<f64> = (1..=max).map(|k| 0.5f64.powi(k as i32)).collect();
    let dist = WeightedIndex::new(&weights).expect("positive weights");
    1 + dist.sample(rng)
}

/// Uniform over all contiguous non-empty spans `[start, end)` of `0..n`.
fn sample_span<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    let total = n * (n + 1) / 2;
    let mut pick = rng.gen_range(0..total);
    for start in 0..n {
        let count = n - start;
        if pick < count {
            return (start, start + 1 + pick);
        }
        pick -= count;
    }
    unreachable!("span index within total")
}

fn position_admits(ctype: ContextType, pos: usize, len: usize) -> bool {
    let has_left = pos > 0;
    let has_right = pos + 1 < len;
    (!ctype.needs_left() || has_left) && (!ctype.needs_right() || has_right)
}

/// Samples one instance of `ctype` from a sentence pair.
///
/// Returns `None` when the target has no eligible gold word for this context
/// type. Gold words need at least two characters, must not be punctuation
/// and, when a vocabulary is given, must be in it.
pub fn simulate_instance<R: Rng + ?Sized>(
    pair: &SentencePair,
    ctype: ContextType,
    vocab: Option<&Vocabulary>,
    rng: &mut R,
) -> Option<WlacInstance> {
    simulate_with_position(pair, ctype, vocab, rng).map(|(inst, _)| inst)
}

pub fn simulate_with_position<R: Rng + ?Sized>(
    pair: &SentencePair,
    ctype: ContextType,
    vocab: Option<&Vocabulary>,
    rng: &mut R,
) -> Option<(WlacInstance, usize)> {
    let n = pair.target.len();
    let mut occurrences: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (pos, word) in pair.target.iter().enumerate() {
        if is_eligible_gold(word, vocab) && position_admits(ctype, pos, n) {
            occurrences.entry(word.as_str()).or_default().push(pos);
        }
    }
    if occurrences.is_empty() {
        return None;
    }
    let words: Vec<&str> = occurrences.keys().copied().collect();
    let gold = words[rng.gen_range(0..words.len())];
    let positions = &occurrences[gold];
    let pos = positions[rng.gen_range(0..positions.len())];

    let gold_chars: Vec<char> = gold.chars().collect();
    let typed_len = sample_typed_len(gold_chars.len() - 1, rng);
    let typed: String = gold_chars[..typed_len].iter().collect();

    let (left, right) = match ctype {
        ContextType::ZeroContext => ((0, 0), (0, 0)),
        ContextType::Prefix => (sample_span(pos, rng), (0, 0)),
        ContextType::Suffix => ((0, 0), shift(sample_span(n - pos - 1, rng), pos + 1)),
        ContextType::BiContext => (
            sample_span(pos, rng),
            shift(sample_span(n - pos - 1, rng), pos + 1),
        ),
        ContextType::PrefixDecoding => ((0, pos), (0, 0)),
        ContextType::PostEditing => ((0, pos), (pos + 1, n)),
    };
    let instance = WlacInstance {
        source: pair.source.clone(),
        left_ctx: pair.target[left.0..left.1].to_vec(),
        right_ctx: pair.target[right.0..right.1].to_vec(),
        typed,
        gold: gold.to_string(),
        ctype,
    };
    Some((instance, pos))
}

fn shift(span: (usize, usize), by: usize) -> (usize, usize) {
    (span.0 + by, span.1 + by)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Fraction of instances per context type; must sum to 1.
    pub mix: BTreeMap<ContextType, f64>,
    /// Number of instances to produce.
    pub instances: usize,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn uniform_general(instances: usize, seed: u64) -> Self {
        SimulationConfig {
            mix: ContextType::GENERAL.iter().map(|&c| (c, 0.25)).collect(),
            instances,
            seed,
        }
    }
}

/// Largest-remainder apportionment of `n` slots by `fractions`.
fn apportion(mix: &BTreeMap<ContextType, f64>, n: usize) -> Vec<(ContextType, usize)> {
    let mut alloc: Vec<(ContextType, usize, f64)> = mix
        .iter()
        .map(|(&c, &f)| {
            let exact = f * n as f64;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = alloc.iter().map(|a| a.1).sum();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].2.total_cmp(&alloc[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        alloc[i].1 += 1;
    }
    alloc.into_iter().map(|(c, k, _)| (c, k)).collect()
}

/// Per-slot generator derived from `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates a dataset whose per-type counts follow `config.mix`.
///
/// Each slot derives its own generator from `(seed, slot)`, so the output is
/// a pure function of the inputs. Pairs are visited in a seeded cyclic order;
/// a pair that cannot host the requested type is passed over for the next.
pub fn simulate_dataset(
    pairs: &[SentencePair],
    vocab: Option<&Vocabulary>,
    config: &SimulationConfig,
) -> Result<Vec<SimulatedInstance>> {
    let total: f64 = config.mix.values().sum();
    if (total - 1.0).abs() > 1e-9 || config.mix.values().any(|&f| f < 0.0) {
        return Err(WlacError::InvalidArgument(format!(
            "context-type mix must sum to 1, got {total}"
        )));
    }
    if pairs.is_empty() || config.instances == 0 {
        return Ok(Vec::new());
    }
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut slots: Vec<ContextType> = apportion(&config.mix, config.instances)
        .into_iter()
        .flat_map(|(c, k)| std::iter::repeat(c).take(k))
        .collect();
    slots.shuffle(&mut master);
    let mut pair_order: Vec<usize> = (0..pairs.len()).collect();
    pair_order.shuffle(&mut master);

    let mut out = Vec::with_capacity(slots.len());
    let mut cursor = 0usize;
    for (slot, &ctype) in slots.iter().enumerate() {
        let mut rng = stream_rng(config.seed, slot as u64 + 1);
        let mut found = None;
        for attempt in 0..pairs.len() {
            let pair_index = pair_order[(cursor + attempt) % pairs.len()];
            if let Some((instance, gold_pos)) =
                simulate_with_position(&pairs[pair_index], ctype, vocab, &mut rng)
            {
                found = Some(SimulatedInstance {
                    instance,
                    pair_index,
                    gold_pos,
                });
                cursor += attempt + 1;
                break;
            }
        }
        match found {
            Some(s) => out.push(s),
            None => {
                return Err(WlacError::InvalidArgument(format!(
                    "no sentence pair can host a {ctype} instance"
                )))
            }
        }
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, instances: &[WlacInstance]) -> Result<()> {
    let file = File::create(path).map_err(|e| WlacError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst)?;
        writeln!(out, "{line}").map_err(|e| WlacError::io(path, e))?;
    }
    out.flush().map_err(|e| WlacError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<WlacInstance>> {
    let file = File::open(path).map_err(|e| WlacError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| WlacError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| WlacError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub const NUM_INTERVALS: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyProfile {
    /// 1-based interval per vocabulary word; interval 1 is the most frequent.
    pub interval_of: HashMap<String, usize>,
    pub proportions: Vec<f64>,
    /// Set when the vocabulary had fewer than ten distinct words.
    pub truncated: bool,
    /// Gold words not found in the vocabulary, excluded from proportions.
    pub unplaced: usize,
}

/// Splits vocabulary words into ten equal-population frequency intervals and
/// measures which fraction of the dataset's gold words falls in each.
pub fn word_frequency_profile(
    vocab: &Vocabulary,
    counts: &HashMap<String, usize>,
    dataset: &[WlacInstance],
) -> Result<FrequencyProfile> {
    if dataset.is_empty() {
        return Err(WlacError::InvalidArgument("empty dataset".into()));
    }
    let mut ranked: Vec<(&str, usize)> = vocab
        .regular_words()
        .map(|(_, w)| (w, counts.get(w).copied().unwrap_or(0)))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let intervals = NUM_INTERVALS.min(ranked.len()).max(1);
    let mut interval_of = HashMap::new();
    for (rank, (w, _)) in ranked.iter().enumerate() {
        interval_of.insert(w.to_string(), rank * intervals / ranked.len() + 1);
    }
    let mut hits = vec![0usize; intervals];
    let mut unplaced = 0;
    for inst in dataset {
        match interval_of.get(&inst.gold) {
            Some(&k) => hits[k - 1] += 1,
            None => unplaced += 1,
        }
    }
    let placed: usize = hits.iter().sum();
    let proportions = hits
        .iter()
        .map(|&h| if placed == 0 { 0.0 } else { h as f64 / placed as f64 })
        .collect();
    Ok(FrequencyProfile {
        interval_of,
        proportions,
        truncated: ranked.len() < NUM_INTERVALS,
        unplaced,
    })
}

/// Mean typed length and mean gold length, in characters.
pub fn typing_statistics(dataset: &[WlacInstance]) -> (f64, f64) {
    if dataset.is_empty() {
        return (0.0, 0.0);
    }
    let n = dataset.len() as f64;
    let typed: usize = dataset.iter().map(|i| i.typed.chars().count()).sum();
    let gold: usize = dataset.iter().map(|i| i.gold.chars().count()).sum();
    (typed as f64 / n, gold as f64 / n)
}
