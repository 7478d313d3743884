//! Id-encoded training examples and target masking for CMBLM pretraining.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextType, SentencePair, WlacInstance};
use crate::neural::TargetInput;
use crate::vocab::{Vocabulary, MASK_ID};

/// A task instance mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInstance {
    pub source: Vec<u32>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub gold: u32,
    pub typed: String,
    pub ctype: ContextType,
}

impl EncodedInstance {
    pub fn encode(inst: &WlacInstance, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Self {
        EncodedInstance {
            source: src_vocab.encode(&inst.source),
            left: tgt_vocab.encode(&inst.left_ctx),
            right: tgt_vocab.encode(&inst.right_ctx),
            gold: tgt_vocab.lookup(&inst.gold),
            typed: inst.typed.clone(),
            ctype: inst.ctype,
        }
    }

    pub fn masked_target(&self) -> TargetInput {
        TargetInput::masked(&self.left, &self.right)
    }

    pub fn target_with(&self, probe: u32) -> TargetInput {
        TargetInput::new(&self.left, probe, &self.right)
    }

    pub fn target_len(&self) -> usize {
        self.left.len() + 1 + self.right.len()
    }

    pub fn token_count(&self) -> usize {
        self.source.len() + self.target_len()
    }
}

/// One sentence pair with part of its target hidden behind `[MASK]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CmblmBatch {
    pub source: Vec<u32>,
    /// Target ids with masked positions replaced by `[MASK]`.
    pub observed: Vec<u32>,
    pub masked_positions: Vec<usize>,
    pub masked_gold: Vec<u32>,
}

impl CmblmBatch {
    pub fn token_count(&self) -> usize {
        self.source.len() + self.observed.len()
    }
}

/// Masks each target token independently with probability `ratio`; if none
/// was picked, one position is chosen uniformly so the example is never
/// empty.
pub fn mask_targets<R: Rng + ?Sized>(
    pair: &SentencePair,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    ratio: f64,
    rng: &mut R,
) -> CmblmBatch {
    let source = src_vocab.encode(&pair.source);
    let target = tgt_vocab.encode(&pair.target);
    mask_ids(source, target, ratio, rng)
}

pub fn mask_ids<R: Rng + ?Sized>(source: Vec<u32>, target: Vec<u32>, ratio: f64, rng: &mut R) -> CmblmBatch {
    assert!(!target.is_empty(), "target must be non-empty");
    let mut positions: Vec<usize> = (0..target.len())
        .filter(|_| rng.gen::<f64>() < ratio)
        .collect();
    if positions.is_empty() {
        positions.push(rng.gen_range(0..target.len()));
    }
    let masked_gold = positions.iter().map(|&p| target[p]).collect();
    let mut observed = target;
    for &p in &positions {
        observed[p] = MASK_ID;
    }
    CmblmBatch {
        source,
        observed,
        masked_positions: positions,
        masked_gold,
    }
}
