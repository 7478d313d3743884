//! Prefix-constrained prediction and the two-step rerank pipeline: retrieve
//! the top-K words of `V(s)` under the baseline, then pick the one with the
//! highest energy.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WlacError};
use crate::neural::ops::softmax_in_place;
use crate::neural::{gather_rows, HeadKind, Model, ModelConfig, PackedBatch, Scalar, TargetInput};
use crate::trie::CandidateTrie;
use crate::vocab::Vocabulary;

pub const DEFAULT_K: usize = 8;

/// Baseline output at the `[MASK]` probe for one query.
#[derive(Debug, Clone)]
pub struct BaselineOutput<F> {
    pub logits: Vec<F>,
    pub probs: Vec<F>,
    /// Aggregate cross-attention of the probe over source positions.
    pub trace: Vec<F>,
}

/// Runs the baseline on a batch of `(source, context)` queries in one
/// packed forward pass.
pub fn baseline_outputs<F: Scalar>(
    model: &Model<F>,
    queries: &[(&[u32], &TargetInput)],
) -> Result<Vec<BaselineOutput<F>>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let mut batch = PackedBatch::new();
    let mut rows = Vec::with_capacity(queries.len());
    for (source, context) in queries {
        let s = batch.add_source(source);
        let seq = batch.add_target(&context.tokens, s);
        rows.push(batch.target_row(seq, context.probe_position));
    }
    let pass = model.forward(&batch, None)?;
    let logits = model.vocab_logits(&gather_rows(&pass.tgt_states, &rows).view());
    Ok(queries
        .iter()
        .zip(logits.outer_iter())
        .enumerate()
        .map(|(seq, ((_, context), row))| {
            let logits = row.to_vec();
            let mut probs = logits.clone();
            softmax_in_place(&mut probs);
            BaselineOutput {
                logits,
                probs,
                trace: model.probe_attention(&pass, seq, context.probe_position),
            }
        })
        .collect())
}

/// Sorts `candidates` by descending logit. The sort is stable, so with
/// candidates given in lexicographic order (as the trie returns them) ties
/// fall back to lexicographic order.
pub fn rank_by_logits<F: Scalar>(logits: &[F], candidates: &[u32]) -> Vec<u32> {
    let mut out = candidates.to_vec();
    out.sort_by(|&a, &b| {
        logits[b as usize]
            .partial_cmp(&logits[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    out
}

/// `Omega(s, K)`: the `min(K, |V(s)|)` most probable words of `V(s)`.
pub fn top_k_from_logits<F: Scalar>(logits: &[F], candidates: &[u32], k: usize) -> Vec<u32> {
    let mut ranked = rank_by_logits(logits, candidates);
    ranked.truncate(k);
    ranked
}

/// Energy scores of several probe words sharing one source and context, plus
/// the probe cross-attention row for each. One packed forward pass.
pub fn energy_outputs<F: Scalar>(
    model: &Model<F>,
    source: &[u32],
    context: &TargetInput,
    words: &[u32],
) -> Result<(Vec<F>, Vec<Vec<F>>)> {
    let mut out = energy_outputs_many(model, &[(source, context, words)])?;
    Ok(out.pop().unwrap_or_default())
}

/// Batched form of [`energy_outputs`] over several queries.
#[allow(clippy::type_complexity)]
pub fn energy_outputs_many<F: Scalar>(
    model: &Model<F>,
    queries: &[(&[u32], &TargetInput, &[u32])],
) -> Result<Vec<(Vec<F>, Vec<Vec<F>>)>> {
    let mut batch = PackedBatch::new();
    let mut rows = Vec::new();
    let mut seqs = Vec::new();
    for (source, context, words) in queries {
        if let Some(&w) = words.iter().find(|&&w| Vocabulary::is_special(w)) {
            return Err(WlacError::SpecialToken(w));
        }
        if words.is_empty() {
            continue;
        }
        let s = batch.add_source(source);
        for &w in words.iter() {
            let t = context.with_probe(w);
            let seq = batch.add_target(&t.tokens, s);
            rows.push(batch.target_row(seq, t.probe_position));
            seqs.push((seq, t.probe_position));
        }
    }
    if rows.is_empty() {
        return Ok(queries.iter().map(|_| (Vec::new(), Vec::new())).collect());
    }
    let pass = model.forward(&batch, None)?;
    let z = model.score_logits(&gather_rows(&pass.tgt_states, &rows).view());
    let mut next = 0;
    Ok(queries
        .iter()
        .map(|(_, _, words)| {
            let range = next..next + words.len();
            next += words.len();
            let scores = range.clone().map(|i| crate::neural::ops::sigmoid(z[i])).collect();
            let traces = range
                .map(|i| model.probe_attention(&pass, seqs[i].0, seqs[i].1))
                .collect();
            (scores, traces)
        })
        .collect())
}

/// Index of the highest energy; ties go to the earliest entry, which in
/// `Omega` order is the better baseline rank.
pub fn rerank_choice<F: Scalar>(energies: &[F]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &e) in energies.iter().enumerate() {
        if best.is_none_or(|b| e > energies[b]) {
            best = Some(i);
        }
    }
    best
}

/// Source text, translation context, and typed characters of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionRequest {
    pub source: Vec<String>,
    pub left_ctx: Vec<String>,
    pub right_ctx: Vec<String>,
    pub typed: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub word: String,
    pub baseline_prob: f64,
    /// 1-based rank under the baseline.
    pub baseline_rank: usize,
    pub energy: Option<f64>,
    /// 1-based rank after reranking; equals `baseline_rank` without an
    /// energy model.
    pub final_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionResult {
    pub chosen: String,
    pub candidates: Vec<CandidateRecord>,
    /// Probe cross-attention over source tokens for the chosen word.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

/// Id-level outcome of the pipeline for one query.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub chosen: u32,
    /// `Omega(s, K)` in baseline order.
    pub omega: Vec<u32>,
    pub baseline_probs: Vec<f64>,
    pub energies: Option<Vec<f64>>,
    pub trace: Vec<f64>,
}

/// Borrowed models plus the candidate budget. Without an energy model the
/// baseline order is final.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub trie: &'a CandidateTrie,
    pub baseline: &'a Model<f32>,
    pub energy: Option<&'a Model<f32>>,
    pub k: usize,
}

impl Pipeline<'_> {
    /// Runs the pipeline for a batch of id-level queries.
    pub fn predict_many(&self, queries: &[(&[u32], &TargetInput, &str)]) -> Result<Vec<Prediction>> {
        let k = self.k;
        if k == 0 {
            return Err(WlacError::InvalidArgument("k must be >= 1".into()));
        }
        let candidate_sets: Vec<Vec<u32>> = queries
            .iter()
            .map(|(_, _, typed)| {
                let c = self.trie.candidates(typed);
                if c.is_empty() {
                    Err(WlacError::NoCandidate {
                        typed: typed.to_string(),
                    })
                } else {
                    Ok(c)
                }
            })
            .collect::<Result<_>>()?;
        let pairs: Vec<(&[u32], &TargetInput)> = queries.iter().map(|(s, c, _)| (*s, *c)).collect();
        let outputs = baseline_outputs(self.baseline, &pairs)?;
        let omegas: Vec<Vec<u32>> = outputs
            .iter()
            .zip(&candidate_sets)
            .map(|(o, c)| top_k_from_logits(&o.logits, c, k))
            .collect();
        let reranked = match self.energy {
            Some(model) => {
                let q: Vec<(&[u32], &TargetInput, &[u32])> = queries
                    .iter()
                    .zip(&omegas)
                    .map(|((s, c, _), o)| (*s, *c, o.as_slice()))
                    .collect();
                Some(energy_outputs_many(model, &q)?)
            }
            None => None,
        };
        Ok(outputs
            .into_iter()
            .zip(omegas)
            .enumerate()
            .map(|(i, (out, omega))| {
                let baseline_probs = omega.iter().map(|&w| f64::from(out.probs[w as usize])).collect();
                let to_f64 = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
                match &reranked {
                    Some(r) => {
                        let (scores, traces) = &r[i];
                        let best = rerank_choice(scores).expect("omega is non-empty");
                        Prediction {
                            chosen: omega[best],
                            omega,
                            baseline_probs,
                            energies: Some(to_f64(scores)),
                            trace: to_f64(&traces[best]),
                        }
                    }
                    None => Prediction {
                        chosen: omega[0],
                        omega,
                        baseline_probs,
                        energies: None,
                        trace: to_f64(&out.trace),
                    },
                }
            })
            .collect())
    }

}

/// Vocabularies, candidate index and models, immutable after construction.
#[derive(Debug, Clone)]
pub struct Engine {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub trie: CandidateTrie,
    pub baseline: Model<f32>,
    pub energy: Option<Model<f32>>,
}

fn check_model(config: &ModelConfig, src: &Vocabulary, tgt: &Vocabulary, what: &str) -> Result<()> {
    if config.src_vocab_size != src.len() || config.tgt_vocab_size != tgt.len() {
        return Err(WlacError::VocabularyMismatch(format!(
            "{what} expects vocabularies of {}/{} words, got {}/{}",
            config.src_vocab_size,
            config.tgt_vocab_size,
            src.len(),
            tgt.len()
        )));
    }
    Ok(())
}

impl Engine {
    pub fn new(
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        baseline: Model<f32>,
        energy: Option<Model<f32>>,
    ) -> Result<Self> {
        if baseline.head != HeadKind::Vocab {
            return Err(WlacError::InvalidArgument("baseline needs a vocabulary head".into()));
        }
        check_model(&baseline.config, &src_vocab, &tgt_vocab, "baseline")?;
        if let Some(e) = &energy {
            if e.head != HeadKind::Score {
                return Err(WlacError::InvalidArgument("energy model needs a score head".into()));
            }
            check_model(&e.config, &src_vocab, &tgt_vocab, "energy model")?;
        }
        let trie = CandidateTrie::build(&tgt_vocab);
        Ok(Engine {
            src_vocab,
            tgt_vocab,
            trie,
            baseline,
            energy,
        })
    }

    /// Encodes a request. The probe is `[MASK]`.
    pub fn encode(&self, request: &SuggestionRequest) -> (Vec<u32>, TargetInput) {
        let left = self.tgt_vocab.encode(&request.left_ctx);
        let right = self.tgt_vocab.encode(&request.right_ctx);
        (
            self.src_vocab.encode(&request.source),
            TargetInput::masked(&left, &right),
        )
    }

    /// The inference pipeline over this engine's models.
    pub fn pipeline(&self, k: usize, use_energy: bool) -> Pipeline<'_> {
        Pipeline {
            trie: &self.trie,
            baseline: &self.baseline,
            energy: self.energy.as_ref().filter(|_| use_energy),
            k,
        }
    }

    pub fn suggest(&self, request: &SuggestionRequest, use_energy: bool, with_trace: bool) -> Result<SuggestionResult> {
        let (source, context) = self.encode(request);
        let p = self
            .pipeline(request.k, use_energy)
            .predict_many(&[(&source, &context, &request.typed)])?
            .pop()
            .expect("one query");
        Ok(self.to_result(p, with_trace))
    }

    fn to_result(&self, p: Prediction, with_trace: bool) -> SuggestionResult {
        let n = p.omega.len();
        let mut final_ranks = vec![0; n];
        match &p.energies {
            Some(e) => {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| e[b].partial_cmp(&e[a]).unwrap_or(std::cmp::Ordering::Equal));
                for (rank, i) in order.into_iter().enumerate() {
                    final_ranks[i] = rank + 1;
                }
            }
            None => final_ranks.iter_mut().enumerate().for_each(|(i, r)| *r = i + 1),
        }
        let word = |id: u32| self.tgt_vocab.word_of(id).unwrap_or_default().to_string();
        let mut candidates: Vec<CandidateRecord> = p
            .omega
            .iter()
            .enumerate()
            .map(|(i, &id)| CandidateRecord {
                word: word(id),
                baseline_prob: p.baseline_probs[i],
                baseline_rank: i + 1,
                energy: p.energies.as_ref().map(|e| e[i]),
                final_rank: final_ranks[i],
            })
            .collect();
        candidates.sort_by_key(|c| c.final_rank);
        SuggestionResult {
            chosen: word(p.chosen),
            candidates,
            trace: with_trace.then_some(p.trace),
        }
    }
}
