//! Training loops. All three share one driver: token-budget batches drawn
//! from a seeded epoch order, Adam updates, and a metrics record at step 0,
//! every `eval_interval` steps and at the end.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{mask_targets, EncodedInstance};
use super::negatives::{baseline_distributions, sample_within, NegativeSampling};
use super::objective::{evaluate, EnergyItem, LossOutput, Objective};
use super::optim::{Adam, TrainConfig};
use crate::corpus::{stream_rng, SentencePair};
use crate::error::{Result, WlacError};
use crate::evaluation::{accuracy, AccuracyReport};
use crate::inference::Pipeline;
use crate::neural::{HeadKind, Model, ModelConfig};
use crate::trie::CandidateTrie;
use crate::vocab::Vocabulary;

const DROPOUT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const DATA_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training loss since the previous record (the loss of the first
    /// batch at step 0, without dropout).
    pub loss: f64,
    pub lr: f64,
    /// Validation accuracy in percent per context type, plus `overall`.
    pub val_accuracy_by_type: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub metrics: Vec<MetricsRecord>,
}

/// Where the initial backbone comes from.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    Random,
    /// Backbone copied from this model; its head is copied too when the
    /// head kinds match.
    From(&'a Model<f32>),
}

impl Init<'_> {
    pub fn build(&self, config: &ModelConfig, head: HeadKind, seed: u64) -> Result<Model<f32>> {
        let mut model = Model::init(config, head, seed)?;
        if let Init::From(source) = self {
            model.load_backbone_from(source)?;
            if source.head == head {
                let r = model.layout.range(model.layout.slots.head);
                model.data[r.clone()].copy_from_slice(&source.data[r]);
            }
        }
        Ok(model)
    }
}

/// Training and validation instances with the candidate index used to score
/// validation predictions.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub train: &'a [EncodedInstance],
    pub valid: &'a [EncodedInstance],
    pub trie: &'a CandidateTrie,
}

/// Seeded epoch order with token-budget batches.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: 0,
            rng: stream_rng(seed, ORDER_STREAM),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next(&mut self, budget: usize, cost: impl Fn(usize) -> usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut used = 0;
        loop {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let i = self.order[self.pos];
            let c = cost(i);
            if !out.is_empty() && (used + c > budget || out.len() == self.order.len()) {
                break;
            }
            out.push(i);
            used += c;
            self.pos += 1;
        }
        out
    }
}

struct MetricsLog {
    records: Vec<MetricsRecord>,
    writer: Option<(BufWriter<File>, std::path::PathBuf)>,
}

impl MetricsLog {
    fn new(path: Option<&Path>) -> Result<Self> {
        let writer = match path {
            Some(p) => Some((
                BufWriter::new(File::create(p).map_err(|e| WlacError::io(p, e))?),
                p.to_path_buf(),
            )),
            None => None,
        };
        Ok(MetricsLog {
            records: Vec::new(),
            writer,
        })
    }

    fn push(&mut self, record: MetricsRecord) -> Result<()> {
        info!(
            "step {} loss {:.4} lr {:.2e} val {:?}",
            record.step, record.loss, record.lr, record.val_accuracy_by_type
        );
        if let Some((w, p)) = &mut self.writer {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w).map_err(|e| WlacError::io(&*p, e))?;
            w.flush().map_err(|e| WlacError::io(&*p, e))?;
        }
        self.records.push(record);
        Ok(())
    }
}

fn accuracy_map(report: &AccuracyReport) -> BTreeMap<String, f64> {
    let mut map: BTreeMap<String, f64> = report
        .per_type
        .iter()
        .map(|(t, v)| (t.name().to_string(), *v))
        .collect();
    map.insert("overall".into(), report.overall);
    map
}

type StepFn<'a> = dyn FnMut(&[usize], &Model<f32>, Option<&mut (dyn RngCore + '_)>, bool) -> Result<LossOutput<f32>> + 'a;

/// The shared loop. `step_fn` turns a batch of item indices into a loss;
/// `validate` produces the accuracy map for a record.
fn drive(
    mut model: Model<f32>,
    train: &TrainConfig,
    n_items: usize,
    cost: &dyn Fn(usize) -> usize,
    step_fn: &mut StepFn,
    validate: &dyn Fn(&Model<f32>) -> Result<BTreeMap<String, f64>>,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    train.validate()?;
    if n_items == 0 {
        return Err(WlacError::InvalidArgument("empty training set".into()));
    }
    let mut log = MetricsLog::new(metrics_path)?;
    let mut batcher = Batcher::new(n_items, train.seed);
    let mut dropout_rng = stream_rng(train.seed, DROPOUT_STREAM);
    let mut adam = Adam::new(model.num_params(), train);

    let mut pending = batcher.next(train.batch_tokens, cost);
    let initial = step_fn(&pending, &model, None, false)?.loss as f64;
    if !initial.is_finite() {
        return Err(WlacError::Diverged { step: 0, loss: initial });
    }
    log.push(MetricsRecord {
        step: 0,
        loss: initial,
        lr: 0.0,
        val_accuracy_by_type: validate(&model)?,
    })?;

    let mut running = 0.0;
    let mut since = 0;
    for step in 1..=train.max_steps {
        let batch = if step == 1 {
            std::mem::take(&mut pending)
        } else {
            batcher.next(train.batch_tokens, cost)
        };
        let out = step_fn(&batch, &model, Some(&mut dropout_rng), true)?;
        let loss = out.loss as f64;
        let grads = out.grads.expect("gradient requested");
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(WlacError::Diverged { step, loss });
        }
        let lr = train.learning_rate(step);
        adam.step(&mut model.data, &grads, lr);
        if !model.all_finite() {
            return Err(WlacError::Diverged { step, loss });
        }
        running += loss;
        since += 1;
        if step % train.eval_interval == 0 || step == train.max_steps {
            log.push(MetricsRecord {
                step,
                loss: running / since as f64,
                lr,
                val_accuracy_by_type: validate(&model)?,
            })?;
            running = 0.0;
            since = 0;
        }
    }
    Ok(TrainOutcome {
        model,
        metrics: log.records,
    })
}

/// Conditional masked bilingual LM pretraining: cross-entropy over masked
/// target positions only. Masks are redrawn every time a pair is visited.
pub fn pretrain_cmblm(
    pairs: &[SentencePair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    config: &ModelConfig,
    train: &TrainConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let max_len = config.max_len;
    let usable: Vec<&SentencePair> = pairs
        .iter()
        .filter(|p| p.source.len() <= max_len && p.target.len() <= max_len)
        .collect();
    let model = Model::init(config, HeadKind::Vocab, train.seed)?;
    let mut data_rng = stream_rng(train.seed, DATA_STREAM);
    let ratio = train.mask_ratio;
    let cost = |i: usize| usable[i].source.len() + usable[i].target.len();
    let mut step_fn = |idx: &[usize], m: &Model<f32>, rng: Option<&mut (dyn RngCore + '_)>, grad: bool| {
        let batches: Vec<_> = idx
            .iter()
            .map(|&i| mask_targets(usable[i], src_vocab, tgt_vocab, ratio, &mut data_rng))
            .collect();
        evaluate(m, &Objective::Cmblm(&batches), rng, grad)
    };
    drive(
        model,
        train,
        usable.len(),
        &cost,
        &mut step_fn,
        &|_| Ok(BTreeMap::new()),
        metrics_path,
    )
}

fn usable_instances<'a>(data: &'a [EncodedInstance], max_len: usize) -> Vec<&'a EncodedInstance> {
    data.iter()
        .filter(|i| i.source.len() <= max_len && i.target_len() <= max_len)
        .collect()
}

/// The baseline word predictor: cross-entropy of the gold word at the
/// `[MASK]` probe.
pub fn train_baseline(
    data: TaskData,
    init: Init,
    config: &ModelConfig,
    train: &TrainConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let items = usable_instances(data.train, config.max_len);
    let model = init.build(config, HeadKind::Vocab, train.seed)?;
    let cost = |i: usize| items[i].token_count();
    let mut step_fn = |idx: &[usize], m: &Model<f32>, rng: Option<&mut (dyn RngCore + '_)>, grad: bool| {
        let batch: Vec<EncodedInstance> = idx.iter().map(|&i| items[i].clone()).collect();
        evaluate(m, &Objective::Baseline(&batch), rng, grad)
    };
    let validate = |m: &Model<f32>| {
        if data.valid.is_empty() {
            return Ok(BTreeMap::new());
        }
        let pipeline = Pipeline {
            trie: data.trie,
            baseline: m,
            energy: None,
            k: train.eval_k,
        };
        Ok(accuracy_map(&accuracy(&pipeline, data.valid)?))
    };
    drive(model, train, items.len(), &cost, &mut step_fn, &validate, metrics_path)
}

/// The energy model, trained with the negative-sampling objective. The
/// baseline supplies negatives (unless sampling uniformly) and the
/// candidate pool for reranked validation accuracy.
pub fn train_energy(
    data: TaskData,
    baseline: &Model<f32>,
    strategy: &NegativeSampling,
    init: Init,
    config: &ModelConfig,
    train: &TrainConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    strategy.validate()?;
    if baseline.head != HeadKind::Vocab {
        return Err(WlacError::InvalidArgument("baseline needs a vocabulary head".into()));
    }
    if baseline.config.src_vocab_size != config.src_vocab_size || baseline.config.tgt_vocab_size != config.tgt_vocab_size {
        return Err(WlacError::VocabularyMismatch("baseline and energy model vocabularies differ".into()));
    }
    let items = usable_instances(data.train, config.max_len);
    let mut model = init.build(config, HeadKind::Score, train.seed)?;
    // The score vector starts at zero whatever the backbone source.
    let r = model.layout.range(model.layout.slots.head);
    model.data[r].fill(0.0);
    let width = 1 + match *strategy {
        NegativeSampling::UniformRandom { k }
        | NegativeSampling::BaselineRandom { k }
        | NegativeSampling::BaselineTopK { k } => k,
        NegativeSampling::BaselineTopP { cap, .. } => cap,
    };
    let cost = |i: usize| items[i].source.len() + width * items[i].target_len();
    let vocab_size = config.tgt_vocab_size;
    let mut data_rng = stream_rng(train.seed, DATA_STREAM);
    let mut step_fn = |idx: &[usize], m: &Model<f32>, rng: Option<&mut (dyn RngCore + '_)>, grad: bool| {
        let batch: Vec<&EncodedInstance> = idx.iter().map(|&i| items[i]).collect();
        let dists = if strategy.needs_baseline() {
            baseline_distributions(baseline, &batch)?.into_iter().map(Some).collect()
        } else {
            vec![None; batch.len()]
        };
        let energy_items: Vec<EnergyItem> = batch
            .iter()
            .zip(dists)
            .map(|(inst, d)| {
                let pool = train.prefix_negatives.then(|| data.trie.candidates(&inst.typed));
                let negs = sample_within(strategy, vocab_size, d.as_deref(), pool.as_deref(), &mut data_rng)?;
                Ok(EnergyItem::new((*inst).clone(), &negs))
            })
            .collect::<Result<_>>()?;
        evaluate(m, &Objective::Energy(&energy_items), rng, grad)
    };
    let validate = |m: &Model<f32>| {
        if data.valid.is_empty() {
            return Ok(BTreeMap::new());
        }
        let pipeline = Pipeline {
            trie: data.trie,
            baseline,
            energy: Some(m),
            k: train.eval_k,
        };
        Ok(accuracy_map(&accuracy(&pipeline, data.valid)?))
    };
    drive(model, train, items.len(), &cost, &mut step_fn, &validate, metrics_path)
}
