//! Subcommands. Each writes its outputs to the given paths and returns a
//! JSON summary that `main` prints as one line on stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use wlac_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
use wlac_core::corpus::{
    load_dataset, load_parallel_corpus, save_dataset, save_parallel_corpus, simulate_dataset, typing_statistics,
    word_frequency_profile, ContextType, SimulationConfig, WlacInstance,
};
use wlac_core::evaluation::{
    accuracy, alignment_recall_at_n, keystroke_simulation, latency_report, load_annotations, load_episodes,
    recall_at_k, save_annotations, EvalReport, Episode, KeystrokeMode, TraceModel,
};
use wlac_core::inference::{Engine, DEFAULT_K};
use wlac_core::neural::ModelConfig;
use wlac_core::synthetic::{self, SyntheticSpec};
use wlac_core::training::{
    pretrain_cmblm, train_baseline, train_energy, EncodedInstance, Init, NegativeSampling, TaskData, TrainConfig,
};
use wlac_core::trie::CandidateTrie;
use wlac_core::vocab::{build_vocabulary, word_counts, Side, Vocabulary};

use crate::service::{self, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "wlac", version, about = "Word-level autocompletion for computer-aided translation")]
pub struct Cli {
    /// JSON file with optional `model`, `train` and `service` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the subcommand and of the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build source and target vocabularies from a parallel corpus.
    BuildVocab(BuildVocabArgs),
    /// Simulate autocompletion instances from a parallel corpus.
    Simulate(SimulateArgs),
    /// Write the synthetic token-mapping corpus with annotated test instances.
    GenSynthetic(GenSyntheticArgs),
    /// Pretrain a backbone with conditional masked bilingual LM.
    Pretrain(PretrainArgs),
    /// Train the baseline word predictor.
    TrainBaseline(TrainBaselineArgs),
    /// Train the energy model used for reranking.
    TrainEnergy(TrainEnergyArgs),
    /// Accuracy, recall@K, alignment recall and latency on a dataset.
    Evaluate(EvaluateArgs),
    /// Count keystrokes needed to type each gold word.
    KeystrokeSim(KeystrokeArgs),
    /// Run the HTTP suggestion service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Parallel corpus, one `source<TAB>target` pair per line.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    src_out: PathBuf,
    #[arg(long)]
    tgt_out: PathBuf,
    #[arg(long, default_value_t = 50_000)]
    max_size: usize,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    instances: usize,
    /// Context-type mix as `type=fraction,...`; defaults to the four
    /// general types in equal parts.
    #[arg(long)]
    mix: Option<String>,
    /// Only words in this target vocabulary can be gold words.
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5000)]
    train_pairs: usize,
    #[arg(long, default_value_t = 500)]
    heldout_pairs: usize,
    /// Simulated instances per split.
    #[arg(long, default_value_t = 2000)]
    instances: usize,
}

/// Model and training settings shared by the training subcommands.
#[derive(Debug, Args)]
pub struct TrainCommon {
    #[arg(long)]
    steps: Option<usize>,
    /// JSON-lines metrics log.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    #[command(flatten)]
    common: TrainCommon,
}

#[derive(Debug, Args)]
pub struct TrainBaselineArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Pretrained checkpoint to start from; its vocabularies are used.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    src_vocab: Option<PathBuf>,
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
    #[command(flatten)]
    common: TrainCommon,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EnergyInit {
    Random,
    Baseline,
    Cmblm,
}

#[derive(Debug, Args)]
pub struct TrainEnergyArgs {
    /// Trained baseline checkpoint (required).
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Where the backbone comes from.
    #[arg(long, value_enum, default_value = "cmblm")]
    init: EnergyInit,
    /// Pretrained checkpoint, needed for `--init cmblm`.
    #[arg(long)]
    cmblm: Option<PathBuf>,
    /// `topk:K`, `random:K`, `uniform:K` or `topp:P[:CAP]`.
    #[arg(long, default_value = "topk:8")]
    negatives: String,
    #[command(flatten)]
    common: TrainCommon,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    energy: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    recall_ks: Vec<usize>,
    /// Alignment annotations (JSON lines keyed by instance index).
    #[arg(long)]
    alignments: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    alignment_ns: Vec<usize>,
    /// Timed requests for the latency report; 0 disables it.
    #[arg(long, default_value_t = 0)]
    latency_samples: usize,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum KeystrokeKind {
    Model,
    Oracle,
    None,
    Replay,
}

#[derive(Debug, Args)]
pub struct KeystrokeArgs {
    /// Episodes as JSON lines; instance datasets work too.
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long, value_enum, default_value = "model")]
    mode: KeystrokeKind,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    energy: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    energy: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_body_bytes: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Include the probe attention row in responses.
    #[arg(long)]
    trace: bool,
}

/// A failure caused by the arguments rather than by the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Settings shared by all subcommands after merging the config file with
/// the global flags.
struct Globals {
    config: RunConfig,
    seed: Option<u64>,
}

impl Globals {
    fn load(cli_config: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut config: RunConfig = match cli_config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            config.train.seed = s;
        }
        Ok(Globals { config, seed })
    }

    fn seed_or(&self, default: u64) -> u64 {
        self.seed.unwrap_or(default)
    }

    fn train(&self, common: &TrainCommon) -> Result<RunConfig> {
        let mut config = self.config.clone();
        if let Some(s) = common.steps {
            config.train.max_steps = s;
        }
        config.train.validate().map_err(|e| usage(e.to_string()))?;
        Ok(config)
    }
}

pub fn run(cli: Cli) -> Result<Value> {
    let g = Globals::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Simulate(a) => simulate(a, &g),
        Command::GenSynthetic(a) => gen_synthetic(a, &g),
        Command::Pretrain(a) => pretrain(a, &g),
        Command::TrainBaseline(a) => baseline(a, &g),
        Command::TrainEnergy(a) => energy(a, &g),
        Command::Evaluate(a) => evaluate(a, &g),
        Command::KeystrokeSim(a) => keystrokes(a),
        Command::Serve(a) => serve(a, &g),
    }
}

fn build_vocab(a: BuildVocabArgs) -> Result<Value> {
    let corpus = load_parallel_corpus(&a.corpus, a.limit)?;
    let src = build_vocabulary(&corpus.pairs, Side::Source, a.max_size, a.min_freq);
    let tgt = build_vocabulary(&corpus.pairs, Side::Target, a.max_size, a.min_freq);
    src.save(&a.src_out)?;
    tgt.save(&a.tgt_out)?;
    Ok(json!({
        "pairs": corpus.pairs.len(),
        "skipped": corpus.skipped,
        "src_vocab": {"size": src.len(), "hash": src.hash()},
        "tgt_vocab": {"size": tgt.len(), "hash": tgt.hash()},
    }))
}

fn parse_mix(text: &str) -> Result<BTreeMap<ContextType, f64>> {
    text.split(',')
        .map(|part| {
            let (name, frac) = part
                .split_once('=')
                .ok_or_else(|| usage(format!("bad mix entry {part:?}")))?;
            let ctype = ContextType::parse(name.trim()).ok_or_else(|| usage(format!("unknown context type {name:?}")))?;
            let frac: f64 = frac.trim().parse().map_err(|_| usage(format!("bad fraction {frac:?}")))?;
            Ok((ctype, frac))
        })
        .collect()
}

fn simulate(a: SimulateArgs, g: &Globals) -> Result<Value> {
    let corpus = load_parallel_corpus(&a.corpus, a.limit)?;
    let vocab = a.tgt_vocab.as_deref().map(Vocabulary::load).transpose()?;
    let mut config = SimulationConfig::uniform_general(a.instances, g.seed_or(7));
    if let Some(mix) = &a.mix {
        config.mix = parse_mix(mix)?;
    }
    let sims = simulate_dataset(&corpus.pairs, vocab.as_ref(), &config)?;
    let instances: Vec<WlacInstance> = sims.into_iter().map(|s| s.instance).collect();
    save_dataset(&a.out, &instances)?;
    let (typed, gold) = typing_statistics(&instances);
    let mut summary = json!({
        "instances": instances.len(),
        "mean_typed_chars": typed,
        "mean_gold_chars": gold,
    });
    if let Some(v) = &vocab {
        let counts = word_counts(&corpus.pairs, Side::Target);
        let profile = word_frequency_profile(v, &counts, &instances)?;
        summary["frequency_profile"] = json!(profile.proportions);
    }
    Ok(summary)
}

fn gen_synthetic(a: GenSyntheticArgs, g: &Globals) -> Result<Value> {
    let seed = g.seed_or(SyntheticSpec::default().seed);
    let spec = SyntheticSpec {
        seed,
        train_pairs: a.train_pairs,
        heldout_pairs: a.heldout_pairs,
        ..SyntheticSpec::default()
    };
    let corpus = synthetic::generate(&spec);
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let dir = &a.out_dir;
    save_parallel_corpus(&dir.join("train.tsv"), &corpus.train)?;
    save_parallel_corpus(&dir.join("heldout.tsv"), &corpus.heldout)?;
    std::fs::write(dir.join("language.json"), serde_json::to_vec_pretty(&corpus.language)?)?;
    for (name, pairs, stream) in [("train", &corpus.train, 1), ("heldout", &corpus.heldout, 2)] {
        let config = SimulationConfig::uniform_general(a.instances, seed.wrapping_add(stream));
        let (sims, annotations) = synthetic::simulate_annotated(pairs, &config)?;
        let instances: Vec<WlacInstance> = sims.into_iter().map(|s| s.instance).collect();
        save_dataset(&dir.join(format!("{name}.jsonl")), &instances)?;
        save_annotations(&dir.join(format!("{name}.align.jsonl")), &annotations)?;
    }
    Ok(json!({
        "out_dir": dir,
        "train_pairs": corpus.train.len(),
        "heldout_pairs": corpus.heldout.len(),
        "instances_per_split": a.instances,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ModelShape {
    d_model: usize,
    d_ffn: usize,
    n_heads: usize,
    n_src_layers: usize,
    n_tgt_layers: usize,
    dropout: f64,
    max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 1);
        ModelShape {
            d_model: d.d_model,
            d_ffn: d.d_ffn,
            n_heads: d.n_heads,
            n_src_layers: d.n_src_layers,
            n_tgt_layers: d.n_tgt_layers,
            dropout: d.dropout,
            max_len: d.max_len,
        }
    }
}

impl ModelShape {
    fn config(&self, src: &Vocabulary, tgt: &Vocabulary) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            n_heads: self.n_heads,
            n_src_layers: self.n_src_layers,
            n_tgt_layers: self.n_tgt_layers,
            dropout: self.dropout,
            max_len: self.max_len,
            src_vocab_size: src.len(),
            tgt_vocab_size: tgt.len(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelShape,
    train: TrainConfig,
    service: ServiceConfig,
}

fn encode_all(instances: &[WlacInstance], src: &Vocabulary, tgt: &Vocabulary) -> Vec<EncodedInstance> {
    instances.iter().map(|i| EncodedInstance::encode(i, src, tgt)).collect()
}

fn load_encoded(path: Option<&Path>, src: &Vocabulary, tgt: &Vocabulary) -> Result<Vec<EncodedInstance>> {
    match path {
        Some(p) => Ok(encode_all(&load_dataset(p)?, src, tgt)),
        None => Ok(Vec::new()),
    }
}

fn metadata(config: &RunConfig, extra: Value) -> Value {
    let mut v = json!({ "train": config.train, "model": config.model });
    if let (Some(obj), Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    v
}

fn last_metrics(metrics: &[wlac_core::training::MetricsRecord]) -> Value {
    metrics.last().map(|m| json!(m)).unwrap_or(Value::Null)
}

fn pretrain(a: PretrainArgs, g: &Globals) -> Result<Value> {
    let config = g.train(&a.common)?;
    let corpus = load_parallel_corpus(&a.corpus, None)?;
    let src = Vocabulary::load(&a.src_vocab)?;
    let tgt = Vocabulary::load(&a.tgt_vocab)?;
    let model_config = config.model.config(&src, &tgt);
    let outcome = pretrain_cmblm(
        &corpus.pairs,
        &src,
        &tgt,
        &model_config,
        &config.train,
        a.common.metrics.as_deref(),
    )?;
    let ckpt = Checkpoint {
        kind: ModelKind::Cmblm,
        model: outcome.model,
        src_vocab: src,
        tgt_vocab: tgt,
        metadata: metadata(&config, json!({"pairs": corpus.pairs.len()})),
    };
    save_checkpoint(&a.common.out, &ckpt)?;
    Ok(json!({"out": a.common.out, "final": last_metrics(&outcome.metrics)}))
}

fn baseline(a: TrainBaselineArgs, g: &Globals) -> Result<Value> {
    let config = g.train(&a.common)?;
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    let (src, tgt) = match (&init, &a.src_vocab, &a.tgt_vocab) {
        (Some(c), _, _) => (c.src_vocab.clone(), c.tgt_vocab.clone()),
        (None, Some(s), Some(t)) => (Vocabulary::load(s)?, Vocabulary::load(t)?),
        _ => return Err(usage("train-baseline needs --init or both --src-vocab and --tgt-vocab")),
    };
    let model_config = match &init {
        Some(c) => c.model.config.clone(),
        None => config.model.config(&src, &tgt),
    };
    let train = encode_all(&load_dataset(&a.train)?, &src, &tgt);
    let valid = load_encoded(a.valid.as_deref(), &src, &tgt)?;
    let trie = CandidateTrie::build(&tgt);
    let data = TaskData {
        train: &train,
        valid: &valid,
        trie: &trie,
    };
    let start = match &init {
        Some(c) => Init::From(&c.model),
        None => Init::Random,
    };
    let outcome = train_baseline(data, start, &model_config, &config.train, a.common.metrics.as_deref())?;
    let ckpt = Checkpoint {
        kind: ModelKind::Baseline,
        model: outcome.model,
        src_vocab: src,
        tgt_vocab: tgt,
        metadata: metadata(&config, json!({"init": init.as_ref().map(|c| c.kind.name())})),
    };
    save_checkpoint(&a.common.out, &ckpt)?;
    Ok(json!({"out": a.common.out, "final": last_metrics(&outcome.metrics)}))
}

fn energy(a: TrainEnergyArgs, g: &Globals) -> Result<Value> {
    let baseline_path = a
        .baseline
        .as_deref()
        .ok_or_else(|| usage("train-energy requires --baseline"))?;
    let strategy = NegativeSampling::parse(&a.negatives).map_err(|e| usage(e.to_string()))?;
    let config = g.train(&a.common)?;
    let baseline = load_checkpoint(baseline_path)?;
    if baseline.kind != ModelKind::Baseline {
        return Err(usage(format!("{} is not a baseline checkpoint", baseline_path.display())));
    }
    let cmblm = match (a.init, &a.cmblm) {
        (EnergyInit::Cmblm, Some(p)) => Some(load_checkpoint(p)?),
        (EnergyInit::Cmblm, None) => return Err(usage("--init cmblm needs --cmblm <checkpoint>")),
        _ => None,
    };
    if let Some(c) = &cmblm {
        baseline.check_pairing(c)?;
    }
    let (src, tgt) = (&baseline.src_vocab, &baseline.tgt_vocab);
    let train = encode_all(&load_dataset(&a.train)?, src, tgt);
    let valid = load_encoded(a.valid.as_deref(), src, tgt)?;
    let trie = CandidateTrie::build(tgt);
    let data = TaskData {
        train: &train,
        valid: &valid,
        trie: &trie,
    };
    let init = match (&cmblm, a.init) {
        (Some(c), _) => Init::From(&c.model),
        (None, EnergyInit::Baseline) => Init::From(&baseline.model),
        _ => Init::Random,
    };
    let outcome = train_energy(
        data,
        &baseline.model,
        &strategy,
        init,
        &baseline.model.config,
        &config.train,
        a.common.metrics.as_deref(),
    )?;
    let ckpt = Checkpoint {
        kind: ModelKind::Energy,
        model: outcome.model,
        src_vocab: src.clone(),
        tgt_vocab: tgt.clone(),
        metadata: metadata(
            &config,
            json!({"negatives": strategy, "init": format!("{:?}", a.init).to_lowercase()}),
        ),
    };
    save_checkpoint(&a.common.out, &ckpt)?;
    Ok(json!({"out": a.common.out, "final": last_metrics(&outcome.metrics)}))
}

/// Loads a baseline and an optional energy checkpoint into an engine.
pub fn load_engine(baseline: &Path, energy: Option<&Path>) -> Result<Engine> {
    let b = load_checkpoint(baseline)?;
    if b.kind != ModelKind::Baseline {
        bail!(usage(format!("{} is not a baseline checkpoint", baseline.display())));
    }
    let e = energy.map(load_checkpoint).transpose()?;
    if let Some(e) = &e {
        if e.kind != ModelKind::Energy {
            bail!(usage("the energy checkpoint has the wrong kind"));
        }
        b.check_pairing(e)?;
    }
    Ok(Engine::new(b.src_vocab, b.tgt_vocab, b.model, e.map(|c| c.model))?)
}

fn evaluate(a: EvaluateArgs, g: &Globals) -> Result<Value> {
    if a.k == 0 {
        return Err(usage("--k must be >= 1"));
    }
    let engine = load_engine(&a.baseline, a.energy.as_deref())?;
    let instances = load_dataset(&a.data)?;
    let data = encode_all(&instances, &engine.src_vocab, &engine.tgt_vocab);
    let pipeline = engine.pipeline(a.k, true);
    let baseline_only = engine.pipeline(a.k, false);
    let acc = accuracy(&pipeline, &data)?;
    let baseline_accuracy = match engine.energy {
        Some(_) => Some(accuracy(&baseline_only, &data)?),
        None => None,
    };
    let alignment_recall = match &a.alignments {
        Some(p) => {
            let ann = load_annotations(p)?;
            let model = match &engine.energy {
                Some(e) => TraceModel::Energy(e),
                None => TraceModel::Baseline(&engine.baseline),
            };
            Some(alignment_recall_at_n(model, &data, &ann, &a.alignment_ns, g.seed_or(7))?)
        }
        None => None,
    };
    let latency = match a.latency_samples {
        0 => None,
        n => Some(latency_report(&pipeline, &data, 20, n)?),
    };
    let report = EvalReport {
        accuracy: acc,
        baseline_accuracy,
        recall_at_k: recall_at_k(&baseline_only, &data, &a.recall_ks)?,
        alignment_recall,
        keystrokes: None,
        latency,
    };
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(json!(report))
}

fn keystrokes(a: KeystrokeArgs) -> Result<Value> {
    let episodes: Vec<Episode> = load_episodes(&a.episodes)?;
    let report = match a.mode {
        KeystrokeKind::Model => {
            let baseline = a
                .baseline
                .as_deref()
                .ok_or_else(|| usage("--mode model needs --baseline"))?;
            if a.k == 0 {
                return Err(usage("--k must be >= 1"));
            }
            let engine = load_engine(baseline, a.energy.as_deref())?;
            let mode = KeystrokeMode::Pipeline(engine.pipeline(a.k, true));
            keystroke_simulation(&mode, &engine.src_vocab, &engine.tgt_vocab, &episodes)?
        }
        other => {
            let mode = match other {
                KeystrokeKind::Oracle => KeystrokeMode::Oracle,
                KeystrokeKind::None => KeystrokeMode::None,
                _ => KeystrokeMode::Replay,
            };
            let empty = Vocabulary::from_words(Vec::<String>::new());
            keystroke_simulation(&mode, &empty, &empty, &episodes)?
        }
    };
    Ok(json!(report))
}

fn serve(a: ServeArgs, g: &Globals) -> Result<Value> {
    let mut config = g.config.service.clone();
    if let Some(b) = a.bind {
        config.bind = b;
    }
    config.default_k = a.k.unwrap_or(config.default_k);
    config.max_body_bytes = a.max_body_bytes.unwrap_or(config.max_body_bytes);
    config.max_tokens = a.max_tokens.unwrap_or(config.max_tokens);
    config.trace |= a.trace;
    if config.default_k == 0 || config.max_body_bytes == 0 || config.max_tokens == 0 || config.max_k < config.default_k {
        return Err(usage("k, max_body_bytes and max_tokens must be positive and k at most max_k"));
    }
    let engine = load_engine(&a.baseline, a.energy.as_deref())?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service::serve(engine, config))?;
    Ok(json!({"status": "stopped"}))
}

/// Machine-readable error object for stderr.
pub fn error_json(err: &anyhow::Error) -> Value {
    let kind = if err.downcast_ref::<UsageError>().is_some() {
        "usage"
    } else if let Some(e) = err.downcast_ref::<wlac_core::WlacError>() {
        e.kind()
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "error"
    };
    json!({"error": kind, "message": format!("{err:#}")})
}
