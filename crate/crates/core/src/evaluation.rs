//! Measurement protocols: accuracy by context type, recall@K, alignment
//! recall@n from attention, keystroke simulation and latency.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{stream_rng, ContextType, WlacInstance};
use crate::error::{Result, WlacError};
use crate::inference::{baseline_outputs, energy_outputs, rank_by_logits, rerank_choice, Pipeline};
use crate::neural::{Model, TargetInput};
use crate::training::EncodedInstance;
use crate::vocab::Vocabulary;

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Percent correct per context type present in the data.
    pub per_type: BTreeMap<ContextType, f64>,
    pub counts: BTreeMap<ContextType, usize>,
    /// Unweighted mean over the four general context types present (over
    /// all present types when none of them is).
    pub overall: f64,
    /// Fraction of all instances answered correctly.
    pub micro: f64,
    pub correct: usize,
    pub total: usize,
}

/// Aggregates `(type, correct)` outcomes. Permutation invariant.
pub fn accuracy_from_outcomes(outcomes: &[(ContextType, bool)]) -> Result<AccuracyReport> {
    if outcomes.is_empty() {
        return Err(WlacError::InvalidArgument("empty dataset".into()));
    }
    let mut hits: BTreeMap<ContextType, (usize, usize)> = BTreeMap::new();
    for &(t, ok) in outcomes {
        let e = hits.entry(t).or_default();
        e.0 += ok as usize;
        e.1 += 1;
    }
    let per_type: BTreeMap<ContextType, f64> = hits
        .iter()
        .map(|(&t, &(c, n))| (t, 100.0 * c as f64 / n as f64))
        .collect();
    let general: Vec<f64> = ContextType::GENERAL
        .iter()
        .filter_map(|t| per_type.get(t).copied())
        .collect();
    let pool: Vec<f64> = if general.is_empty() {
        per_type.values().copied().collect()
    } else {
        general
    };
    let correct = hits.values().map(|h| h.0).sum();
    Ok(AccuracyReport {
        overall: pool.iter().sum::<f64>() / pool.len() as f64,
        counts: hits.iter().map(|(&t, &(_, n))| (t, n)).collect(),
        per_type,
        micro: correct as f64 / outcomes.len() as f64,
        correct,
        total: outcomes.len(),
    })
}

/// Chosen word per instance; `None` when no vocabulary word starts with
/// the typed characters.
pub fn predictions(pipeline: &Pipeline, instances: &[EncodedInstance]) -> Result<Vec<Option<u32>>> {
    let mut out = vec![None; instances.len()];
    let live: Vec<usize> = (0..instances.len())
        .filter(|&i| pipeline.trie.has_candidates(&instances[i].typed))
        .collect();
    for chunk in live.chunks(CHUNK) {
        let targets: Vec<TargetInput> = chunk.iter().map(|&i| instances[i].masked_target()).collect();
        let queries: Vec<(&[u32], &TargetInput, &str)> = chunk
            .iter()
            .zip(&targets)
            .map(|(&i, t)| (instances[i].source.as_slice(), t, instances[i].typed.as_str()))
            .collect();
        for (&i, p) in chunk.iter().zip(pipeline.predict_many(&queries)?) {
            out[i] = Some(p.chosen);
        }
    }
    Ok(out)
}

pub fn accuracy(pipeline: &Pipeline, instances: &[EncodedInstance]) -> Result<AccuracyReport> {
    let preds = predictions(pipeline, instances)?;
    let outcomes: Vec<(ContextType, bool)> = instances
        .iter()
        .zip(preds)
        .map(|(inst, p)| (inst.ctype, p == Some(inst.gold)))
        .collect();
    accuracy_from_outcomes(&outcomes)
}

/// 0-based rank of the gold word in `V(s)` ordered by the baseline, `None`
/// when the gold is not a candidate.
pub fn gold_ranks(baseline: &Model<f32>, pipeline: &Pipeline, instances: &[EncodedInstance]) -> Result<Vec<Option<usize>>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(CHUNK) {
        let targets: Vec<TargetInput> = chunk.iter().map(|i| i.masked_target()).collect();
        let queries: Vec<(&[u32], &TargetInput)> =
            chunk.iter().zip(&targets).map(|(i, t)| (i.source.as_slice(), t)).collect();
        for (inst, o) in chunk.iter().zip(baseline_outputs(baseline, &queries)?) {
            let ranked = rank_by_logits(&o.logits, &pipeline.trie.candidates(&inst.typed));
            out.push(ranked.iter().position(|&w| w == inst.gold));
        }
    }
    Ok(out)
}

/// Fraction of instances whose gold word is in `Omega(s, K)`, per K.
pub fn recall_at_k(pipeline: &Pipeline, instances: &[EncodedInstance], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if instances.is_empty() {
        return Err(WlacError::InvalidArgument("empty dataset".into()));
    }
    let ranks = gold_ranks(pipeline.baseline, pipeline, instances)?;
    Ok(recall_curve(&ranks, ks))
}

pub fn recall_curve(ranks: &[Option<usize>], ks: &[usize]) -> Vec<(usize, f64)> {
    ks.iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            (k, hits as f64 / ranks.len() as f64)
        })
        .collect()
}

/// Annotated source positions for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentAnnotation {
    pub index: usize,
    pub source_positions: BTreeSet<usize>,
}

pub fn save_annotations(path: &Path, annotations: &[AlignmentAnnotation]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| WlacError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for a in annotations {
        serde_json::to_writer(&mut w, a)?;
        writeln!(w).map_err(|e| WlacError::io(path, e))?;
    }
    w.flush().map_err(|e| WlacError::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<BTreeMap<usize, BTreeSet<usize>>> {
    let file = std::fs::File::open(path).map_err(|e| WlacError::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| WlacError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: AlignmentAnnotation = serde_json::from_str(&line).map_err(|e| WlacError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.insert(a.index, a.source_positions);
    }
    Ok(out)
}

/// Source positions by decreasing weight; exact ties are shuffled.
pub fn rank_positions<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.shuffle(rng);
    // stable sort keeps the shuffled order within ties
    order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// Which model's attention is probed.
#[derive(Debug, Clone, Copy)]
pub enum TraceModel<'a> {
    /// Probe is `[MASK]`.
    Baseline(&'a Model<f32>),
    /// Probe is the gold word.
    Energy(&'a Model<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecall {
    pub curve: Vec<(usize, f64)>,
    pub evaluated: usize,
    /// Instances without an annotation.
    pub skipped: usize,
}

pub fn probe_traces(model: TraceModel, instances: &[&EncodedInstance]) -> Result<Vec<Vec<f64>>> {
    let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
    match model {
        TraceModel::Baseline(m) => {
            let mut out = Vec::with_capacity(instances.len());
            for chunk in instances.chunks(CHUNK) {
                let targets: Vec<TargetInput> = chunk.iter().map(|i| i.masked_target()).collect();
                let queries: Vec<(&[u32], &TargetInput)> =
                    chunk.iter().zip(&targets).map(|(i, t)| (i.source.as_slice(), t)).collect();
                out.extend(baseline_outputs(m, &queries)?.into_iter().map(|o| widen(o.trace)));
            }
            Ok(out)
        }
        TraceModel::Energy(m) => instances
            .iter()
            .map(|i| {
                let (_, mut traces) = energy_outputs(m, &i.source, &i.masked_target(), &[i.gold])?;
                Ok(widen(traces.pop().unwrap_or_default()))
            })
            .collect(),
    }
}

/// Recall of annotated source positions among the top-n attended ones.
/// `annotations` is keyed by instance index.
pub fn alignment_recall_at_n(
    model: TraceModel,
    instances: &[EncodedInstance],
    annotations: &BTreeMap<usize, BTreeSet<usize>>,
    ns: &[usize],
    seed: u64,
) -> Result<AlignmentRecall> {
    let annotated: Vec<usize> = (0..instances.len())
        .filter(|i| annotations.get(i).is_some_and(|a| !a.is_empty()))
        .collect();
    let refs: Vec<&EncodedInstance> = annotated.iter().map(|&i| &instances[i]).collect();
    let traces = probe_traces(model, &refs)?;
    let mut rng = stream_rng(seed, 0);
    let first_hits: Vec<usize> = annotated
        .iter()
        .zip(&traces)
        .map(|(i, trace)| {
            let gold = &annotations[i];
            rank_positions(trace, &mut rng)
                .iter()
                .position(|p| gold.contains(p))
                .unwrap_or(usize::MAX)
        })
        .collect();
    Ok(AlignmentRecall {
        curve: alignment_curve(&first_hits, ns),
        evaluated: annotated.len(),
        skipped: instances.len() - annotated.len(),
    })
}

/// `first_hits[i]` is the 0-based rank of the first annotated position.
pub fn alignment_curve(first_hits: &[usize], ns: &[usize]) -> Vec<(usize, f64)> {
    ns.iter()
        .map(|&n| {
            let hits = first_hits.iter().filter(|&&r| r < n).count();
            let rate = if first_hits.is_empty() {
                0.0
            } else {
                hits as f64 / first_hits.len() as f64
            };
            (n, rate)
        })
        .collect()
}

/// One word typed by a user: the gold word with its full context. Session
/// logs may also carry the top suggestion seen after each keystroke.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub source: Vec<String>,
    pub left_ctx: Vec<String>,
    pub right_ctx: Vec<String>,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestions: Option<Vec<Option<String>>>,
}

impl From<&WlacInstance> for Episode {
    fn from(inst: &WlacInstance) -> Self {
        Episode {
            source: inst.source.clone(),
            left_ctx: inst.left_ctx.clone(),
            right_ctx: inst.right_ctx.clone(),
            gold: inst.gold.clone(),
            suggestions: None,
        }
    }
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path).map_err(|e| WlacError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| WlacError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| WlacError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub enum KeystrokeMode<'a> {
    Pipeline(Pipeline<'a>),
    /// Always suggests the gold word.
    Oracle,
    /// No autocompletion: every character is typed.
    None,
    /// Uses the suggestions recorded in each episode.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeystrokeReport {
    pub episodes: usize,
    pub total: usize,
    pub average: f64,
    /// `(keystrokes, proportion of episodes)`, ascending.
    pub histogram: Vec<(usize, f64)>,
}

/// Keystrokes for one word: the shortest typed prefix after which the top
/// suggestion is the gold word, plus one to accept it; the full length when
/// no proper prefix works.
pub fn keystrokes_for(gold: &str, first_match: Option<usize>) -> usize {
    let len = gold.chars().count();
    match first_match {
        Some(l) if l >= 1 && l < len => l + 1,
        _ => len,
    }
}

pub fn keystroke_report(counts: &[usize]) -> KeystrokeReport {
    let total: usize = counts.iter().sum();
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in counts {
        *hist.entry(c).or_default() += 1;
    }
    let n = counts.len().max(1) as f64;
    KeystrokeReport {
        episodes: counts.len(),
        total,
        average: if counts.is_empty() { 0.0 } else { total as f64 / n },
        histogram: hist.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
    }
}

/// Top suggestion after each proper prefix of `gold`, for one episode.
fn pipeline_suggestions(
    pipeline: &Pipeline,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    episode: &Episode,
) -> Result<Vec<Option<u32>>> {
    let source = src_vocab.encode(&episode.source);
    let context = TargetInput::masked(&tgt_vocab.encode(&episode.left_ctx), &tgt_vocab.encode(&episode.right_ctx));
    // The baseline forward does not depend on the typed characters, so one
    // pass serves every prefix; the energy model scores the union of the
    // candidate pools once.
    let out = baseline_outputs(pipeline.baseline, &[(&source, &context)])?.pop().expect("one query");
    let chars: Vec<char> = episode.gold.chars().collect();
    let omegas: Vec<Vec<u32>> = (1..chars.len())
        .map(|l| {
            let typed: String = chars[..l].iter().collect();
            let mut ranked = rank_by_logits(&out.logits, &pipeline.trie.candidates(&typed));
            ranked.truncate(pipeline.k);
            ranked
        })
        .collect();
    let Some(energy) = pipeline.energy else {
        return Ok(omegas.iter().map(|o| o.first().copied()).collect());
    };
    let pool: Vec<u32> = omegas.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let (scores, _) = energy_outputs(energy, &source, &context, &pool)?;
    let score_of: BTreeMap<u32, f32> = pool.into_iter().zip(scores).collect();
    Ok(omegas
        .iter()
        .map(|o| {
            let e: Vec<f32> = o.iter().map(|w| score_of[w]).collect();
            rerank_choice(&e).map(|i| o[i])
        })
        .collect())
}

pub fn keystroke_simulation(
    mode: &KeystrokeMode,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    episodes: &[Episode],
) -> Result<KeystrokeReport> {
    let mut counts = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let len = ep.gold.chars().count();
        let first = match mode {
            KeystrokeMode::None => None,
            KeystrokeMode::Oracle => Some(1),
            KeystrokeMode::Replay => {
                let recorded = ep.suggestions.as_ref().ok_or_else(|| {
                    WlacError::InvalidArgument("replay needs recorded suggestions in every episode".into())
                })?;
                recorded
                    .iter()
                    .take(len.saturating_sub(1))
                    .position(|s| s.as_deref() == Some(ep.gold.as_str()))
                    .map(|i| i + 1)
            }
            KeystrokeMode::Pipeline(p) => {
                let gold = tgt_vocab.id_of(&ep.gold);
                pipeline_suggestions(p, src_vocab, tgt_vocab, ep)?
                    .iter()
                    .position(|&s| s.is_some() && s == gold)
                    .map(|i| i + 1)
            }
        };
        counts.push(keystrokes_for(&ep.gold, first));
    }
    Ok(keystroke_report(&counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub samples: usize,
    pub baseline_ms_mean: f64,
    pub baseline_ms_std: f64,
    pub rerank_ms_mean: f64,
    pub rerank_ms_std: f64,
    pub total_ms_mean: f64,
    pub total_ms_std: f64,
    /// `(baseline + rerank) / baseline`; exactly 1 without reranking.
    pub overhead_ratio: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Times the pipeline one request at a time. The first `warmup` requests
/// are run but not measured; instances are cycled to reach `samples`.
pub fn latency_report(
    pipeline: &Pipeline,
    instances: &[EncodedInstance],
    warmup: usize,
    samples: usize,
) -> Result<LatencyReport> {
    let usable: Vec<&EncodedInstance> = instances
        .iter()
        .filter(|i| pipeline.trie.has_candidates(&i.typed))
        .collect();
    if usable.is_empty() || samples == 0 {
        return Err(WlacError::InvalidArgument("latency needs at least one usable instance".into()));
    }
    let mut base = Vec::with_capacity(samples);
    let mut rerank = Vec::with_capacity(samples);
    for n in 0..warmup + samples {
        let inst = usable[n % usable.len()];
        let context = inst.masked_target();
        let t0 = Instant::now();
        let out = baseline_outputs(pipeline.baseline, &[(&inst.source, &context)])?
            .pop()
            .expect("one query");
        let mut omega = rank_by_logits(&out.logits, &pipeline.trie.candidates(&inst.typed));
        omega.truncate(pipeline.k);
        let t1 = Instant::now();
        if let Some(energy) = pipeline.energy {
            let (scores, _) = energy_outputs(energy, &inst.source, &context, &omega)?;
            std::hint::black_box(rerank_choice(&scores));
        }
        let t2 = Instant::now();
        if n >= warmup {
            base.push((t1 - t0).as_secs_f64() * 1e3);
            rerank.push((t2 - t1).as_secs_f64() * 1e3);
        }
    }
    if pipeline.energy.is_none() {
        rerank.iter_mut().for_each(|r| *r = 0.0);
    }
    let totals: Vec<f64> = base.iter().zip(&rerank).map(|(b, r)| b + r).collect();
    let (bm, bs) = mean_std(&base);
    let (rm, rs) = mean_std(&rerank);
    let (tm, ts) = mean_std(&totals);
    Ok(LatencyReport {
        samples,
        baseline_ms_mean: bm,
        baseline_ms_std: bs,
        rerank_ms_mean: rm,
        rerank_ms_std: rs,
        total_ms_mean: tm,
        total_ms_std: ts,
        overhead_ratio: if pipeline.energy.is_none() { 1.0 } else { tm / bm },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: AccuracyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_accuracy: Option<AccuracyReport>,
    pub recall_at_k: Vec<(usize, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_recall: Option<AlignmentRecall>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keystrokes: Option<KeystrokeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
}
