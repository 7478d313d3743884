//! Loss functions with analytic gradients.
//!
//! * baseline: cross-entropy of the gold word at the `[MASK]` probe;
//! * CMBLM: mean cross-entropy over all masked target positions;
//! * energy: `-(S(gold) - log sum_{v in D} exp S(v))`, where `D` is the gold
//!   word plus its negatives and `S = sigmoid(theta . h)`.

use ndarray::{Array1, Array2};
use rand::RngCore;

use super::data::{CmblmBatch, EncodedInstance};
use crate::error::{Result, WlacError};
use crate::neural::ops::{log_sum_exp, sigmoid, softmax, softmax_in_place};
use crate::neural::{gather_rows, scatter_rows, Model, PackedBatch, Scalar, TargetInput};
use crate::vocab::Vocabulary;

/// An instance with its energy candidate set; `candidates[0]` is the gold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnergyItem {
    pub instance: EncodedInstance,
    pub candidates: Vec<u32>,
}

/// `{gold}` followed by the negatives, duplicates removed, order kept.
pub fn candidate_set(gold: u32, negatives: &[u32]) -> Vec<u32> {
    let mut out = vec![gold];
    for &n in negatives {
        if !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

impl EnergyItem {
    pub fn new(instance: EncodedInstance, negatives: &[u32]) -> Self {
        let candidates = candidate_set(instance.gold, negatives);
        EnergyItem {
            instance,
            candidates,
        }
    }
}

pub enum Objective<'a> {
    Baseline(&'a [EncodedInstance]),
    Cmblm(&'a [CmblmBatch]),
    Energy(&'a [EnergyItem]),
}

impl Objective<'_> {
    pub fn len(&self) -> usize {
        match self {
            Objective::Baseline(b) => b.len(),
            Objective::Cmblm(b) => b.len(),
            Objective::Energy(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct LossOutput<F> {
    pub loss: F,
    pub grads: Option<Vec<F>>,
}

/// Evaluates the mean loss over a batch, and its gradient when requested.
/// Dropout is applied only when `rng` is given.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    objective: &Objective,
    rng: Option<&mut (dyn RngCore + '_)>,
    with_grad: bool,
) -> Result<LossOutput<F>> {
    if objective.is_empty() {
        return Err(WlacError::InvalidArgument("empty batch".into()));
    }
    match objective {
        Objective::Baseline(items) => {
            let mut batch = PackedBatch::new();
            let mut rows = Vec::with_capacity(items.len());
            let mut golds = Vec::with_capacity(items.len());
            for item in items.iter() {
                let s = batch.add_source(&item.source);
                let t = item.masked_target();
                let seq = batch.add_target(&t.tokens, s);
                rows.push(batch.target_row(seq, t.probe_position));
                golds.push(item.gold);
            }
            vocab_cross_entropy(model, &batch, &rows, &golds, rng, with_grad)
        }
        Objective::Cmblm(items) => {
            let mut batch = PackedBatch::new();
            let mut rows = Vec::new();
            let mut golds = Vec::new();
            for item in items.iter() {
                let s = batch.add_source(&item.source);
                let seq = batch.add_target(&item.observed, s);
                for (&p, &g) in item.masked_positions.iter().zip(&item.masked_gold) {
                    rows.push(batch.target_row(seq, p));
                    golds.push(g);
                }
            }
            vocab_cross_entropy(model, &batch, &rows, &golds, rng, with_grad)
        }
        Objective::Energy(items) => energy_loss(model, items, rng, with_grad),
    }
}

fn vocab_cross_entropy<F: Scalar>(
    model: &Model<F>,
    batch: &PackedBatch,
    rows: &[usize],
    golds: &[u32],
    rng: Option<&mut (dyn RngCore + '_)>,
    with_grad: bool,
) -> Result<LossOutput<F>> {
    let pass = model.forward(batch, rng)?;
    let states = gather_rows(&pass.tgt_states, rows);
    let mut probs = model.vocab_logits(&states.view());
    let n = F::from_usize(rows.len()).unwrap();
    let mut loss = F::zero();
    for (mut row, &g) in probs.outer_iter_mut().zip(golds) {
        let slice = row.as_slice_mut().expect("contiguous");
        softmax_in_place(slice);
        loss -= slice[g as usize].max(F::min_positive_value()).ln();
    }
    loss /= n;
    if !with_grad {
        return Ok(LossOutput { loss, grads: None });
    }
    // d loss / d logits = (p - onehot) / n
    let mut d_logits = probs;
    for (mut row, &g) in d_logits.outer_iter_mut().zip(golds) {
        row[g as usize] -= F::one();
    }
    d_logits /= n;
    let mut grads = vec![F::zero(); model.num_params()];
    let d_states = model.vocab_logits_backward(&states.view(), &d_logits, &mut grads);
    let d_tgt = scatter_rows(&d_states, rows, pass.tgt_states.nrows());
    model.backward(batch, &pass, &d_tgt, &mut grads);
    Ok(LossOutput {
        loss,
        grads: Some(grads),
    })
}

fn energy_loss<F: Scalar>(
    model: &Model<F>,
    items: &[EnergyItem],
    rng: Option<&mut (dyn RngCore + '_)>,
    with_grad: bool,
) -> Result<LossOutput<F>> {
    let mut batch = PackedBatch::new();
    let mut rows = Vec::new();
    for item in items {
        if item.candidates.first() != Some(&item.instance.gold) {
            return Err(WlacError::InvalidArgument(
                "energy candidate set must start with the gold word".into(),
            ));
        }
        if let Some(&w) = item.candidates.iter().find(|&&w| Vocabulary::is_special(w)) {
            return Err(WlacError::SpecialToken(w));
        }
        let s = batch.add_source(&item.instance.source);
        let base = item.instance.masked_target();
        for &w in &item.candidates {
            let t = base.with_probe(w);
            let seq = batch.add_target(&t.tokens, s);
            rows.push(batch.target_row(seq, t.probe_position));
        }
    }
    let pass = model.forward(&batch, rng)?;
    let states = gather_rows(&pass.tgt_states, &rows);
    let z = model.score_logits(&states.view());
    let scores: Vec<F> = z.iter().map(|&v| sigmoid(v)).collect();
    let n = F::from_usize(items.len()).unwrap();
    let mut loss = F::zero();
    let mut d_scores = vec![F::zero(); scores.len()];
    let mut start = 0;
    for item in items {
        let k = item.candidates.len();
        let s = &scores[start..start + k];
        loss += log_sum_exp(s) - s[0];
        if with_grad {
            let p = softmax(s);
            for j in 0..k {
                let indicator = if j == 0 { F::one() } else { F::zero() };
                d_scores[start + j] = (p[j] - indicator) / n;
            }
        }
        start += k;
    }
    loss /= n;
    if !with_grad {
        return Ok(LossOutput { loss, grads: None });
    }
    let d_z: Array1<F> = d_scores
        .iter()
        .zip(&scores)
        .map(|(&g, &s)| g * s * (F::one() - s))
        .collect();
    let mut grads = vec![F::zero(); model.num_params()];
    let d_states: Array2<F> = model.score_logits_backward(&states.view(), &d_z, &mut grads);
    let d_tgt = scatter_rows(&d_states, &rows, pass.tgt_states.nrows());
    model.backward(&batch, &pass, &d_tgt, &mut grads);
    Ok(LossOutput {
        loss,
        grads: Some(grads),
    })
}

/// Energy scores `S(w, x, c)` for several candidate words sharing one
/// source and context, computed in one packed forward pass.
pub fn energy_scores<F: Scalar>(
    model: &Model<F>,
    source: &[u32],
    context: &TargetInput,
    words: &[u32],
) -> Result<Vec<F>> {
    if let Some(&w) = words.iter().find(|&&w| Vocabulary::is_special(w)) {
        return Err(WlacError::SpecialToken(w));
    }
    if words.is_empty() {
        return Ok(Vec::new());
    }
    let mut batch = PackedBatch::new();
    let s = batch.add_source(source);
    let rows: Vec<usize> = words
        .iter()
        .map(|&w| {
            let t = context.with_probe(w);
            let seq = batch.add_target(&t.tokens, s);
            batch.target_row(seq, t.probe_position)
        })
        .collect();
    let pass = model.forward(&batch, None)?;
    let states = gather_rows(&pass.tgt_states, &rows);
    Ok(model
        .score_logits(&states.view())
        .iter()
        .map(|&z| sigmoid(z))
        .collect())
}

/// The negative-sampling objective for one instance.
pub fn energy_objective<F: Scalar>(
    model: &Model<F>,
    instance: &EncodedInstance,
    negatives: &[u32],
) -> Result<F> {
    if negatives.is_empty() {
        return Err(WlacError::InvalidArgument("negatives must be non-empty".into()));
    }
    let item = EnergyItem::new(instance.clone(), negatives);
    Ok(evaluate(model, &Objective::Energy(std::slice::from_ref(&item)), None, false)?.loss)
}
