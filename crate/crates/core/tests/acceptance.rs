//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a required criterion fails. P11 is informational.
//!
//! Run alone with `cargo test -p wlac-core --test acceptance`.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wlac_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
use wlac_core::corpus::{stream_rng, SimulatedInstance, SimulationConfig};
use wlac_core::evaluation::{
    accuracy, alignment_recall_at_n, keystroke_simulation, predictions, recall_at_k, Episode, KeystrokeMode,
    TraceModel,
};
use wlac_core::inference::{baseline_outputs, Engine, Pipeline, SuggestionRequest};
use wlac_core::neural::gradcheck::{check_model, finite_difference, relative_error, DEFAULT_EPSILON};
use wlac_core::neural::ops::{sigmoid, softmax};
use wlac_core::neural::{HeadKind, Model, ModelConfig, PackedBatch, TargetInput};
use wlac_core::synthetic::{self, SyntheticCorpus, SyntheticSpec};
use wlac_core::training::{
    energy_objective, mask_ids, pretrain_cmblm, train_baseline, train_energy, EncodedInstance, EnergyItem, Init,
    NegativeSampling, Objective, TaskData, TrainConfig,
};
use wlac_core::trie::CandidateTrie;
use wlac_core::vocab::{build_vocabulary, Side, Vocabulary, NUM_SPECIALS};

// Desk-scale schedule for the trained criteria.
const TRAIN_INSTANCES: usize = 200_000;
const VALID_INSTANCES: usize = 4_000;
const TEST_INSTANCES: usize = 2_000;
const PRETRAIN_STEPS: usize = 4_000;
const BASELINE_STEPS: usize = 5_000;
const ENERGY_STEPS: usize = 3_000;
const LEARNING_RATE: f64 = 2e-3;
const RERANK_K: usize = 8;
// Shorter runs for the paired-seed ablations.
const ABLATION_SEEDS: [u64; 3] = [11, 12, 13];
const ABLATION_ENERGY_STEPS: usize = 1_000;

struct Suite {
    failures: Vec<&'static str>,
}

impl Suite {
    fn record(&mut self, id: &'static str, required: bool, pass: bool, detail: String) {
        let verdict = match (pass, required) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "MISS",
        };
        let tag = if required { "" } else { " (informational)" };
        // written straight to stdout so the libtest-free harness output is
        // never captured
        let mut out = std::io::stdout().lock();
        writeln!(out, "{id} {verdict}{tag}: {detail}").unwrap();
        out.flush().unwrap();
        if required && !pass {
            self.failures.push(id);
        }
    }
}

fn perturbed(config: &ModelConfig, head: HeadKind, seed: u64, scale: f64) -> Model<f64> {
    let mut m = Model::<f64>::init(config, head, seed).unwrap();
    let mut rng = stream_rng(seed, 99);
    for v in m.data.iter_mut() {
        *v += rng.gen_range(-scale..scale);
    }
    m
}

fn encoded(source: &[u32], left: &[u32], right: &[u32], gold: u32) -> EncodedInstance {
    EncodedInstance {
        source: source.to_vec(),
        left: left.to_vec(),
        right: right.to_vec(),
        gold,
        typed: String::new(),
        ctype: wlac_core::corpus::ContextType::BiContext,
    }
}

fn p1_gradients(suite: &mut Suite) {
    let start = Instant::now();
    // closed form: loss = |W x + b - y|^2 / 2
    let (w, x, b, y) = ([0.3, -1.2, 0.7, 2.0, 0.1, -0.4], [0.5, -1.5], [0.2, -0.3, 0.9], [1.0, 0.0, -1.0]);
    let loss = |p: &[f64]| -> f64 {
        (0..3)
            .map(|i| {
                let z = p[2 * i] * x[0] + p[2 * i + 1] * x[1] + p[6 + i] - y[i];
                0.5 * z * z
            })
            .sum()
    };
    let params: Vec<f64> = w.iter().chain(&b).copied().collect();
    let mut analytic = vec![0.0; 9];
    for i in 0..3 {
        let r = w[2 * i] * x[0] + w[2 * i + 1] * x[1] + b[i] - y[i];
        analytic[2 * i] = r * x[0];
        analytic[2 * i + 1] = r * x[1];
        analytic[6 + i] = r;
    }
    let linear = relative_error(&analytic, &finite_difference(loss, &params, DEFAULT_EPSILON));

    let config = ModelConfig::tiny(12, 12);
    let items = vec![
        encoded(&[5, 6, 7], &[8], &[9, 10], 11),
        encoded(&[9, 5], &[], &[7], 6),
        encoded(&[11, 10, 9, 8, 7], &[5, 6], &[], 9),
    ];
    let baseline = check_model(&perturbed(&config, HeadKind::Vocab, 1, 0.3), &Objective::Baseline(&items), DEFAULT_EPSILON)
        .unwrap()
        .max_error();
    let mut rng = stream_rng(3, 0);
    let batches = vec![
        mask_ids(vec![5, 6, 7], vec![8, 9, 10, 11], 0.5, &mut rng),
        mask_ids(vec![7, 8], vec![5, 6], 0.5, &mut rng),
    ];
    let cmblm = check_model(&perturbed(&config, HeadKind::Vocab, 2, 0.3), &Objective::Cmblm(&batches), DEFAULT_EPSILON)
        .unwrap()
        .max_error();
    let energy_items: Vec<EnergyItem> = items
        .iter()
        .map(|inst| {
            let negs: Vec<u32> = (5..12).filter(|&w| w != inst.gold).take(3).collect();
            EnergyItem::new(inst.clone(), &negs)
        })
        .collect();
    let energy = check_model(&perturbed(&config, HeadKind::Score, 4, 0.3), &Objective::Energy(&energy_items), DEFAULT_EPSILON)
        .unwrap()
        .max_error();
    let secs = start.elapsed().as_secs_f64();
    let pass = linear < 1e-6 && baseline < 1e-4 && cmblm < 1e-4 && energy < 1e-4 && secs < 60.0;
    suite.record(
        "P1",
        true,
        pass,
        format!(
            "max rel err linear {linear:.2e} (<1e-6), baseline CE {baseline:.2e}, CMBLM {cmblm:.2e}, energy K=3 {energy:.2e} (<1e-4); {secs:.1}s (<60s)"
        ),
    );
}

fn p2_normalization(suite: &mut Suite) {
    let mut rng = stream_rng(2, 0);
    let mut worst_attn = 0.0f64;
    let mut worst_softmax = 0.0f64;
    let mut negative = false;
    for trial in 0..1000 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let config = ModelConfig {
            d_model: heads * rng.gen_range(2..5),
            d_ffn: 16,
            n_heads: heads,
            n_src_layers: rng.gen_range(1..3),
            n_tgt_layers: rng.gen_range(1..3),
            dropout: 0.0,
            max_len: 32,
            src_vocab_size: 20,
            tgt_vocab_size: 20,
        };
        let mut model = Model::<f32>::init(&config, HeadKind::Vocab, trial).unwrap();
        let scale = rng.gen_range(0.1f32..3.0);
        for v in model.data.iter_mut() {
            *v += rng.gen_range(-scale..scale);
        }
        let mut batch = PackedBatch::new();
        let n_seq = rng.gen_range(1..4);
        for _ in 0..n_seq {
            let src: Vec<u32> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..20)).collect();
            let tgt: Vec<u32> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..20)).collect();
            let s = batch.add_source(&src);
            batch.add_target(&tgt, s);
        }
        let pass = model.forward(&batch, None).unwrap();
        for seq in 0..n_seq {
            for h in 0..heads {
                let mut mats = Vec::new();
                for l in 0..config.n_src_layers {
                    mats.push(pass.source_self_attention(l, seq, h, heads));
                }
                for l in 0..config.n_tgt_layers {
                    mats.push(pass.target_self_attention(l, seq, h, heads));
                    mats.push(pass.cross_attention(l, seq, h, heads));
                }
                for m in mats {
                    for row in m.outer_iter() {
                        negative |= row.iter().any(|&v| v < 0.0);
                        worst_attn = worst_attn.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
                    }
                }
            }
        }
        let logits = model.vocab_logits(&pass.tgt_states.view());
        for row in logits.outer_iter() {
            let p = softmax(&row.to_vec());
            negative |= p.iter().any(|&v| v < 0.0);
            worst_softmax = worst_softmax.max((p.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
    }
    suite.record(
        "P2",
        true,
        worst_attn <= 1e-5 && worst_softmax <= 1e-5 && !negative,
        format!("1000 random forwards: worst |attention row sum - 1| {worst_attn:.2e}, worst |softmax sum - 1| {worst_softmax:.2e} (<=1e-5), negative weights: {negative}"),
    );
}

fn p3_trie(suite: &mut Suite) {
    let mut rng = stream_rng(3, 0);
    let alphabet: Vec<char> = "abcdéß".chars().collect();
    let word = |rng: &mut ChaCha8Rng, max: usize| -> String {
        (0..rng.gen_range(1..=max)).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
    };
    let mut mismatches = 0;
    for _ in 0..1000 {
        let words: Vec<String> = (0..rng.gen_range(0..40)).map(|_| word(&mut rng, 6)).collect();
        let vocab = Vocabulary::from_words(words);
        let typed = if rng.gen_bool(0.1) { String::new() } else { word(&mut rng, 3) };
        let trie = CandidateTrie::build(&vocab);
        let mut expected: Vec<(&str, u32)> = vocab
            .regular_words()
            .filter(|(_, w)| w.starts_with(&typed))
            .map(|(id, w)| (w, id))
            .collect();
        expected.sort();
        let expected: Vec<u32> = expected.into_iter().map(|(_, id)| id).collect();
        if trie.candidates(&typed) != expected {
            mismatches += 1;
        }
    }
    suite.record(
        "P3",
        true,
        mismatches == 0,
        format!("trie vs brute-force prefix scan on 1000 random cases: {mismatches} mismatches (set and order)"),
    );
}

/// S(w) through a forward pass of its own, reading the probe row by hand.
fn oracle_score<F: wlac_core::neural::Scalar>(model: &Model<F>, source: &[u32], context: &TargetInput, w: u32) -> F {
    let target = context.with_probe(w);
    let mut batch = PackedBatch::new();
    let s = batch.add_source(source);
    batch.add_target(&target.tokens, s);
    let pass = model.forward(&batch, None).unwrap();
    let h = pass.tgt_states.row(target.probe_position);
    let theta = &model.data[model.layout.range(model.layout.slots.head)];
    sigmoid(h.iter().zip(theta).map(|(&a, &b)| a * b).sum::<F>())
}

fn p4_likelihood(suite: &mut Suite) {
    let mut worst = 0.0f64;
    let mut rng = stream_rng(4, 0);
    for trial in 0..100u64 {
        let tgt_size = rng.gen_range(NUM_SPECIALS + 2..=16);
        let config = ModelConfig {
            src_vocab_size: 12,
            ..ModelConfig::tiny(12, tgt_size)
        };
        let model = perturbed(&config, HeadKind::Score, 100 + trial, rng.gen_range(0.1..1.5));
        let regular: Vec<u32> = (NUM_SPECIALS as u32..tgt_size as u32).collect();
        let gold = *regular.choose(&mut rng).unwrap();
        let src: Vec<u32> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(NUM_SPECIALS as u32..12)).collect();
        let left: Vec<u32> = (0..rng.gen_range(0..3)).map(|_| *regular.choose(&mut rng).unwrap()).collect();
        let right: Vec<u32> = (0..rng.gen_range(0..3)).map(|_| *regular.choose(&mut rng).unwrap()).collect();
        let inst = encoded(&src, &left, &right, gold);
        let negatives: Vec<u32> = regular.iter().copied().filter(|&w| w != gold).collect();
        let loss = energy_objective(&model, &inst, &negatives).unwrap();
        let context = TargetInput::masked(&left, &right);
        let scores: Vec<f64> = regular.iter().map(|&w| oracle_score(&model, &src, &context, w)).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let s_gold = oracle_score(&model, &src, &context, gold);
        let expected = -(s_gold.exp() / z).ln();
        worst = worst.max((loss - expected).abs());
    }
    suite.record(
        "P4",
        true,
        worst <= 1e-5,
        format!("energy objective with D = full vocabulary vs -log of the normalized exp(S) probability, 100 random models (vocab <= 16): max abs diff {worst:.2e} (<=1e-5)"),
    );
}

fn p5_rerank(suite: &mut Suite) {
    let mut rng = stream_rng(5, 0);
    let mut mismatches = 0;
    let mut near_ties = 0;
    let syllables = ["ka", "ki", "ko", "ta", "te", "to", "na", "ne"];
    for trial in 0..500u64 {
        let words: Vec<String> = (0..rng.gen_range(3..20))
            .map(|_| (0..rng.gen_range(1..4)).map(|_| *syllables.choose(&mut rng).unwrap()).collect())
            .collect();
        let tgt = Vocabulary::from_words(words);
        let src = Vocabulary::from_words(["s1", "s2", "s3", "s4", "s5"]);
        let config = ModelConfig::tiny(src.len(), tgt.len());
        let baseline = Model::<f32>::init(&config, HeadKind::Vocab, 2 * trial).unwrap();
        let mut energy = Model::<f32>::init(&config, HeadKind::Score, 2 * trial + 1).unwrap();
        let head = energy.layout.range(energy.layout.slots.head);
        for v in &mut energy.data[head] {
            *v = rng.gen_range(-1.0..1.0);
        }
        let engine = Engine::new(src, tgt.clone(), baseline, Some(energy)).unwrap();
        let pick = tgt.regular_words().nth(rng.gen_range(0..tgt.len() - NUM_SPECIALS)).unwrap().1.to_string();
        let typed: String = pick.chars().take(rng.gen_range(1..=2)).collect();
        let pool = engine.trie.candidates(&typed);
        let some_words = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
            (0..n)
                .map(|_| tgt.regular_words().nth(rng.gen_range(0..tgt.len() - NUM_SPECIALS)).unwrap().1.to_string())
                .collect()
        };
        let (n_left, n_right) = (rng.gen_range(0..3), rng.gen_range(0..3));
        let request = SuggestionRequest {
            source: (0..rng.gen_range(1..6)).map(|i| format!("s{}", 1 + (i % 5))).collect(),
            left_ctx: some_words(&mut rng, n_left),
            right_ctx: some_words(&mut rng, n_right),
            typed,
            k: pool.len() + rng.gen_range(0..3),
        };
        let result = engine.suggest(&request, true, false).unwrap();
        let (source, context) = engine.encode(&request);
        let scores: Vec<f32> = pool
            .iter()
            .map(|&w| oracle_score(engine.energy.as_ref().unwrap(), &source, &context, w))
            .collect();
        let best = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let argmax = pool[scores.iter().position(|&s| s == best).unwrap()];
        let chosen = tgt.id_of(&result.chosen).unwrap();
        if chosen != argmax {
            let s_chosen = scores[pool.iter().position(|&w| w == chosen).unwrap()];
            if best - s_chosen <= 1e-6 {
                near_ties += 1;
            } else {
                mismatches += 1;
            }
        }
    }
    suite.record(
        "P5",
        true,
        mismatches == 0,
        format!("500 random requests with K >= |V(s)|: {mismatches} choices differ from the exhaustive argmax of S over V(s) ({near_ties} within 1e-6 of the max)"),
    );
}

/// Everything the trained criteria share.
struct Lab {
    corpus: SyntheticCorpus,
    src: Vocabulary,
    tgt: Vocabulary,
    trie: CandidateTrie,
    train: Vec<EncodedInstance>,
    valid: Vec<EncodedInstance>,
    test_sims: Vec<SimulatedInstance>,
    test: Vec<EncodedInstance>,
    annotations: BTreeMap<usize, std::collections::BTreeSet<usize>>,
    config: ModelConfig,
}

impl Lab {
    fn new() -> Self {
        let corpus = synthetic::generate(&SyntheticSpec::default());
        let src = build_vocabulary(&corpus.train, Side::Source, 100_000, 1);
        let tgt = build_vocabulary(&corpus.train, Side::Target, 100_000, 1);
        let encode = |sims: &[SimulatedInstance]| -> Vec<EncodedInstance> {
            sims.iter().map(|s| EncodedInstance::encode(&s.instance, &src, &tgt)).collect()
        };
        let (train_sims, _) =
            synthetic::simulate_annotated(&corpus.train, &SimulationConfig::uniform_general(TRAIN_INSTANCES, 1)).unwrap();
        let split = corpus.heldout.len() / 2;
        let (valid_sims, _) =
            synthetic::simulate_annotated(&corpus.heldout[..split], &SimulationConfig::uniform_general(VALID_INSTANCES, 2))
                .unwrap();
        let (test_sims, ann) =
            synthetic::simulate_annotated(&corpus.heldout[split..], &SimulationConfig::uniform_general(TEST_INSTANCES, 3))
                .unwrap();
        let annotations = ann.into_iter().map(|a| (a.index, a.source_positions)).collect();
        Lab {
            train: encode(&train_sims),
            valid: encode(&valid_sims),
            test: encode(&test_sims),
            trie: CandidateTrie::build(&tgt),
            // 200k fresh simulated instances leave little to regularize, and
            // dropout slows convergence within the step budget
            config: ModelConfig {
                dropout: 0.0,
                ..ModelConfig::desk(src.len(), tgt.len())
            },
            corpus,
            src,
            tgt,
            test_sims,
            annotations,
        }
    }

    fn data(&self) -> TaskData<'_> {
        TaskData {
            train: &self.train,
            valid: &self.valid,
            trie: &self.trie,
        }
    }

    fn train_config(&self, steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: LEARNING_RATE,
            max_steps: steps,
            seed,
            eval_interval: 500,
            eval_k: RERANK_K,
            ..TrainConfig::default()
        }
    }

    fn pipeline<'a>(&'a self, baseline: &'a Model<f32>, energy: Option<&'a Model<f32>>) -> Pipeline<'a> {
        Pipeline {
            trie: &self.trie,
            baseline,
            energy,
            k: RERANK_K,
        }
    }

    fn ambiguous(&self) -> Vec<EncodedInstance> {
        synthetic::ambiguity_subset(&self.corpus.language, &self.test_sims)
            .into_iter()
            .map(|s| EncodedInstance::encode(&s.instance, &self.src, &self.tgt))
            .collect()
    }
}

fn percent(x: f64) -> String {
    format!("{x:.2}%")
}

fn p7_rerank_direction(suite: &mut Suite, lab: &Lab, baseline: &Model<f32>, energy: &Model<f32>) {
    let amb = lab.ambiguous();
    let base_pipe = lab.pipeline(baseline, None);
    let full_pipe = lab.pipeline(baseline, Some(energy));
    let base_acc = accuracy(&base_pipe, &amb).unwrap();
    let full_acc = accuracy(&full_pipe, &amb).unwrap();
    let base_pred = predictions(&base_pipe, &amb).unwrap();
    let full_pred = predictions(&full_pipe, &amb).unwrap();
    // baseline errors whose gold is inside Omega(s, K)
    let mut eligible = 0;
    let mut recovered = 0;
    for (i, inst) in amb.iter().enumerate() {
        if base_pred[i] == Some(inst.gold) {
            continue;
        }
        let out = baseline_outputs(baseline, &[(&inst.source, &inst.masked_target())]).unwrap().pop().unwrap();
        let omega = wlac_core::inference::top_k_from_logits(&out.logits, &lab.trie.candidates(&inst.typed), RERANK_K);
        if omega.contains(&inst.gold) {
            eligible += 1;
            recovered += (full_pred[i] == Some(inst.gold)) as usize;
        }
    }
    let rate = if eligible == 0 { 1.0 } else { recovered as f64 / eligible as f64 };
    let pass = full_acc.overall >= base_acc.overall && rate >= 0.30;
    suite.record(
        "P7",
        true,
        pass,
        format!(
            "ambiguity subset ({} instances): reranked overall {} vs baseline {}; recovered {recovered}/{eligible} = {:.1}% of in-Omega baseline errors (>=30%)",
            amb.len(),
            percent(full_acc.overall),
            percent(base_acc.overall),
            100.0 * rate
        ),
    );
}

fn non_decreasing(curve: &[(usize, f64)]) -> bool {
    curve.windows(2).all(|w| w[0].1 <= w[1].1)
}

fn p8_recall(suite: &mut Suite, lab: &Lab, baseline: &Model<f32>, energy: &Model<f32>) {
    let base_pipe = lab.pipeline(baseline, None);
    let ks: Vec<usize> = (1..=32).collect();
    let recall = recall_at_k(&base_pipe, &lab.test, &ks).unwrap();
    let acc = accuracy(&base_pipe, &lab.test).unwrap();
    let r1 = recall[0].1;
    let exact = r1 == acc.correct as f64 / acc.total as f64;
    let max_len = lab.test.iter().map(|i| i.source.len()).max().unwrap();
    let ns: Vec<usize> = (1..=max_len).collect();
    let base_align = alignment_recall_at_n(TraceModel::Baseline(baseline), &lab.test, &lab.annotations, &ns, 7).unwrap();
    let energy_align = alignment_recall_at_n(TraceModel::Energy(energy), &lab.test, &lab.annotations, &ns, 7).unwrap();
    let reaches_one = |c: &[(usize, f64)]| c.last().map(|p| p.1) == Some(1.0);
    let shape = non_decreasing(&recall)
        && exact
        && non_decreasing(&base_align.curve)
        && non_decreasing(&energy_align.curve)
        && reaches_one(&base_align.curve)
        && reaches_one(&energy_align.curve);
    let direction = energy_align.curve[0].1 >= base_align.curve[0].1;
    suite.record(
        "P8",
        true,
        shape && direction,
        format!(
            "recall@K non-decreasing {} and recall@1 {:.4} == baseline accuracy {:.4}: {exact}; alignment recall@1 energy {:.3} vs baseline {:.3}, recall@{max_len} = {:.3}/{:.3}",
            non_decreasing(&recall),
            r1,
            acc.correct as f64 / acc.total as f64,
            energy_align.curve[0].1,
            base_align.curve[0].1,
            energy_align.curve.last().unwrap().1,
            base_align.curve.last().unwrap().1,
        ),
    );
}

fn p9_keystrokes(suite: &mut Suite, lab: &Lab, baseline: &Model<f32>, energy: &Model<f32>) {
    let episodes: Vec<Episode> = lab.test_sims.iter().map(|s| Episode::from(&s.instance)).collect();
    let run = |mode: &KeystrokeMode| keystroke_simulation(mode, &lab.src, &lab.tgt, &episodes).unwrap().average;
    let oracle = run(&KeystrokeMode::Oracle);
    let none = run(&KeystrokeMode::None);
    let pipeline = run(&KeystrokeMode::Pipeline(lab.pipeline(baseline, Some(energy))));
    let mean_gold = episodes.iter().map(|e| e.gold.chars().count()).sum::<usize>() as f64 / episodes.len() as f64;
    suite.record(
        "P9",
        true,
        oracle == 2.0 && none == mean_gold && pipeline < none,
        format!("{} episodes: oracle {oracle} (==2), none {none} (== mean gold length {mean_gold}), trained pipeline {pipeline:.3} (< none)", episodes.len()),
    );
}

fn p10_reproducibility(suite: &mut Suite, lab: &Lab, cmblm: &Model<f32>, baseline: &Model<f32>, energy: &Model<f32>) {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Vec<u8> {
        let path = dir.path().join(name);
        let config = TrainConfig {
            eval_interval: 20,
            ..lab.train_config(60, 5)
        };
        train_baseline(lab.data(), Init::From(cmblm), &lab.config, &config, Some(&path)).unwrap();
        std::fs::read(path).unwrap()
    };
    let same_logs = run("a.jsonl") == run("b.jsonl");

    let save_load = |kind: ModelKind, model: &Model<f32>| -> Model<f32> {
        let path = dir.path().join(format!("{}.ckpt", kind.name()));
        let ckpt = Checkpoint {
            kind,
            model: model.clone(),
            src_vocab: lab.src.clone(),
            tgt_vocab: lab.tgt.clone(),
            metadata: serde_json::Value::Null,
        };
        save_checkpoint(&path, &ckpt).unwrap();
        load_checkpoint(&path).unwrap().model
    };
    let base2 = save_load(ModelKind::Baseline, baseline);
    let energy2 = save_load(ModelKind::Energy, energy);
    let bits = |m: &Model<f32>| -> Vec<u32> {
        let mut out = Vec::new();
        for inst in lab.test.iter().take(50) {
            let mut batch = PackedBatch::new();
            let s = batch.add_source(&inst.source);
            batch.add_target(&inst.target_with(inst.gold).tokens, s);
            let pass = m.forward(&batch, None).unwrap();
            out.extend(pass.tgt_states.iter().map(|v| v.to_bits()));
            match m.head {
                HeadKind::Vocab => out.extend(m.vocab_logits(&pass.tgt_states.view()).iter().map(|v| v.to_bits())),
                HeadKind::Score => out.extend(m.score_logits(&pass.tgt_states.view()).iter().map(|v| v.to_bits())),
            }
        }
        out
    };
    let same_outputs = bits(baseline) == bits(&base2) && bits(energy) == bits(&energy2);
    suite.record(
        "P10",
        true,
        same_logs && same_outputs,
        format!("same-seed metrics logs byte-identical: {same_logs}; checkpoint round trip gives bitwise-identical forward outputs: {same_outputs}"),
    );
}

fn final_accuracy(outcome: &wlac_core::training::TrainOutcome) -> f64 {
    outcome.metrics.last().unwrap().val_accuracy_by_type["overall"]
}

fn p11_ablations(suite: &mut Suite, lab: &Lab, cmblm: &Model<f32>, baseline: &Model<f32>) {
    let mut topk_wins = 0;
    let mut init_wins = 0;
    let mut rows = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let config = lab.train_config(ABLATION_ENERGY_STEPS, seed);
        let energy = |strategy: &NegativeSampling, init: Init| {
            final_accuracy(&train_energy(lab.data(), baseline, strategy, init, &lab.config, &config, None).unwrap())
        };
        let topk = NegativeSampling::BaselineTopK { k: RERANK_K };
        let uniform = NegativeSampling::UniformRandom { k: RERANK_K };
        let a = energy(&topk, Init::From(cmblm));
        let b = energy(&uniform, Init::From(cmblm));
        let c = energy(&topk, Init::From(baseline));
        topk_wins += (a >= b) as usize;
        init_wins += (a >= c) as usize;
        rows.push(format!("seed {seed}: topk {a:.1} uniform {b:.1} baseline-init {c:.1}"));
    }
    let majority = ABLATION_SEEDS.len() / 2 + 1;
    suite.record(
        "P11",
        false,
        topk_wins >= majority && init_wins >= majority,
        format!(
            "BaselineTopK >= UniformRandom in {topk_wins}/3 seeds, CMBLM init >= baseline-weights init in {init_wins}/3 seeds ({})",
            rows.join("; ")
        ),
    );
}

fn main() {
    // `cargo test -- --list` and filters pass arguments through; there is a
    // single suite, so only honor listing.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut suite = Suite { failures: Vec::new() };
    p1_gradients(&mut suite);
    p2_normalization(&mut suite);
    p3_trie(&mut suite);
    p4_likelihood(&mut suite);
    p5_rerank(&mut suite);

    let lab = Lab::new();
    let start = Instant::now();
    let cmblm = pretrain_cmblm(
        &lab.corpus.train,
        &lab.src,
        &lab.tgt,
        &lab.config,
        &TrainConfig {
            eval_interval: 1000,
            ..lab.train_config(PRETRAIN_STEPS, 1)
        },
        None,
    )
    .unwrap();
    let pre_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let base = train_baseline(lab.data(), Init::From(&cmblm.model), &lab.config, &lab.train_config(BASELINE_STEPS, 1), None).unwrap();
    let base_secs = start.elapsed().as_secs_f64();
    let best_bi = base
        .metrics
        .iter()
        .filter_map(|m| m.val_accuracy_by_type.get("bi_context").map(|&a| (m.step, a)))
        .find(|&(_, a)| a >= 95.0);
    let final_bi = base.metrics.last().unwrap().val_accuracy_by_type["bi_context"];
    let test_bi = accuracy(&lab.pipeline(&base.model, None), &lab.test).unwrap();
    let test_bi = test_bi.per_type[&wlac_core::corpus::ContextType::BiContext];
    suite.record(
        "P6",
        true,
        final_bi >= 95.0 && base_secs < 1200.0,
        format!(
            "baseline from CMBLM ({PRETRAIN_STEPS} pretraining steps, {pre_secs:.0}s): validation bi-context {} after {BASELINE_STEPS} steps (>=95%), first reached at step {}; held-out test bi-context {}; {base_secs:.0}s (<1200s)",
            percent(final_bi),
            best_bi.map_or("never".to_string(), |(s, _)| s.to_string()),
            percent(test_bi)
        ),
    );

    let energy = train_energy(
        lab.data(),
        &base.model,
        &NegativeSampling::BaselineTopK { k: RERANK_K },
        Init::From(&cmblm.model),
        &lab.config,
        &lab.train_config(ENERGY_STEPS, 1),
        None,
    )
    .unwrap()
    .model;
    p7_rerank_direction(&mut suite, &lab, &base.model, &energy);
    p8_recall(&mut suite, &lab, &base.model, &energy);
    p9_keystrokes(&mut suite, &lab, &base.model, &energy);
    p10_reproducibility(&mut suite, &lab, &cmblm.model, &base.model, &energy);
    p11_ablations(&mut suite, &lab, &cmblm.model, &base.model);

    if !suite.failures.is_empty() {
        eprintln!("failed criteria: {}", suite.failures.join(", "));
        std::process::exit(1);
    }
}
