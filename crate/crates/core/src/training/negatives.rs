//! Proposal distributions for the energy model's normalization term.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::EncodedInstance;
use crate::error::{Result, WlacError};
use crate::neural::ops::softmax_in_place;
use crate::neural::{gather_rows, Model, PackedBatch, Scalar};
use crate::vocab::NUM_SPECIALS;

pub const DEFAULT_TOP_P_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NegativeSampling {
    /// `k` iid uniform draws over the non-special vocabulary.
    UniformRandom { k: usize },
    /// `k` iid draws from the baseline distribution.
    BaselineRandom { k: usize },
    /// The smallest baseline-ranked prefix with mass at least `p`, at most
    /// `cap` words.
    BaselineTopP { p: f64, cap: usize },
    /// The `k` most probable words under the baseline.
    BaselineTopK { k: usize },
}

impl NegativeSampling {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NegativeSampling::UniformRandom { k }
            | NegativeSampling::BaselineRandom { k }
            | NegativeSampling::BaselineTopK { k } => k >= 1,
            NegativeSampling::BaselineTopP { p, cap } => p > 0.0 && p <= 1.0 && cap >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(WlacError::InvalidArgument(format!("invalid negative sampling strategy {self:?}")))
        }
    }

    pub fn needs_baseline(&self) -> bool {
        !matches!(self, NegativeSampling::UniformRandom { .. })
    }

    /// Parses `uniform:K`, `random:K`, `topk:K` or `topp:P[:CAP]`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || WlacError::InvalidArgument(format!("bad negative sampling spec {text:?}"));
        let mut parts = text.split(':');
        let kind = parts.next().ok_or_else(bad)?;
        let arg = parts.next().ok_or_else(bad)?;
        let extra = parts.next();
        if parts.next().is_some() || (extra.is_some() && kind != "topp") {
            return Err(bad());
        }
        let count = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let strategy = match kind {
            "uniform" => NegativeSampling::UniformRandom { k: count(arg)? },
            "random" => NegativeSampling::BaselineRandom { k: count(arg)? },
            "topk" => NegativeSampling::BaselineTopK { k: count(arg)? },
            "topp" => NegativeSampling::BaselineTopP {
                p: arg.parse().map_err(|_| bad())?,
                cap: extra.map(count).transpose()?.unwrap_or(DEFAULT_TOP_P_CAP),
            },
            _ => return Err(bad()),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Baseline distributions `P_b(. | x, c)` at the probe for each instance,
/// one packed forward pass. Rows span the full target vocabulary.
pub fn baseline_distributions<F: Scalar>(model: &Model<F>, instances: &[&EncodedInstance]) -> Result<Vec<Vec<F>>> {
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    let mut batch = PackedBatch::new();
    let mut rows = Vec::with_capacity(instances.len());
    for inst in instances {
        let s = batch.add_source(&inst.source);
        let t = inst.masked_target();
        let seq = batch.add_target(&t.tokens, s);
        rows.push(batch.target_row(seq, t.probe_position));
    }
    let pass = model.forward(&batch, None)?;
    let states = gather_rows(&pass.tgt_states, &rows);
    let logits = model.vocab_logits(&states.view());
    Ok(logits
        .outer_iter()
        .map(|row| {
            let mut v = row.to_vec();
            softmax_in_place(&mut v);
            v
        })
        .collect())
}

/// Non-special word ids ordered by decreasing probability, ties by id.
pub fn ranked_words<F: Scalar>(probs: &[F]) -> Vec<u32> {
    rank(probs, (NUM_SPECIALS as u32..probs.len() as u32).collect())
}

fn rank<F: Scalar>(probs: &[F], mut ids: Vec<u32>) -> Vec<u32> {
    ids.sort_by(|&a, &b| {
        probs[b as usize]
            .partial_cmp(&probs[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids
}

/// Draws negatives for one instance. `probs` is the baseline distribution
/// for that instance and must be present for baseline-based strategies.
pub fn sample_from<F: Scalar, R: Rng + ?Sized>(
    strategy: &NegativeSampling,
    vocab_size: usize,
    probs: Option<&[F]>,
    rng: &mut R,
) -> Result<Vec<u32>> {
    sample_within(strategy, vocab_size, probs, None, rng)
}

/// Like [`sample_from`], but baseline-based strategies only propose words
/// from `pool` (typically `V(s)`), with the baseline distribution
/// renormalized over it. Uniform draws still range over the vocabulary.
pub fn sample_within<F: Scalar, R: Rng + ?Sized>(
    strategy: &NegativeSampling,
    vocab_size: usize,
    probs: Option<&[F]>,
    pool: Option<&[u32]>,
    rng: &mut R,
) -> Result<Vec<u32>> {
    strategy.validate()?;
    if vocab_size <= NUM_SPECIALS {
        return Err(WlacError::InvalidArgument("vocabulary has no regular words".into()));
    }
    if let NegativeSampling::UniformRandom { k } = *strategy {
        return Ok((0..k)
            .map(|_| rng.gen_range(NUM_SPECIALS as u32..vocab_size as u32))
            .collect());
    }
    let probs = probs.ok_or(WlacError::MissingBaseline("this negative sampling strategy"))?;
    if probs.len() != vocab_size {
        return Err(WlacError::InvalidArgument(format!(
            "distribution over {} words, vocabulary has {vocab_size}",
            probs.len()
        )));
    }
    let ids: Vec<u32> = match pool {
        None => (NUM_SPECIALS as u32..vocab_size as u32).collect(),
        Some(pool) => pool
            .iter()
            .copied()
            .filter(|&w| w as usize >= NUM_SPECIALS && (w as usize) < vocab_size)
            .collect(),
    };
    if ids.is_empty() {
        return Err(WlacError::InvalidArgument("empty negative pool".into()));
    }
    let mass = |w: u32| probs[w as usize].to_f64().unwrap_or(0.0).max(0.0);
    Ok(match *strategy {
        NegativeSampling::UniformRandom { .. } => unreachable!(),
        NegativeSampling::BaselineRandom { k } => {
            let weights: Vec<f64> = ids.iter().map(|&w| mass(w)).collect();
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| WlacError::InvalidArgument(format!("baseline distribution: {e}")))?;
            (0..k).map(|_| ids[dist.sample(rng)]).collect()
        }
        NegativeSampling::BaselineTopK { k } => {
            let mut ranked = rank(probs, ids);
            ranked.truncate(k);
            ranked
        }
        NegativeSampling::BaselineTopP { p, cap } => {
            let ranked = rank(probs, ids);
            // Mass is measured over the candidate words so that p = 1
            // selects all of them.
            let total: f64 = ranked.iter().map(|&w| mass(w)).sum();
            let mut out = Vec::new();
            let mut acc = 0.0;
            for w in ranked {
                if out.len() == cap {
                    break;
                }
                out.push(w);
                acc += mass(w) / total;
                if acc >= p - 1e-12 {
                    break;
                }
            }
            out
        }
    })
}

/// Negatives for one instance, running the baseline when needed.
pub fn sample_negatives<F: Scalar, R: Rng + ?Sized>(
    instance: &EncodedInstance,
    strategy: &NegativeSampling,
    baseline: Option<&Model<F>>,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let probs = match (strategy.needs_baseline(), baseline) {
        (false, _) => None,
        (true, None) => return Err(WlacError::MissingBaseline("this negative sampling strategy")),
        (true, Some(m)) => baseline_distributions(m, &[instance])?.pop(),
    };
    sample_from(strategy, vocab_size, probs.as_deref(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..50 {
            let p = probs(12, seed);
            let got = sample_from(&NegativeSampling::BaselineTopK { k: 3 }, 12, Some(&p), &mut rng).unwrap();
            let mut all: Vec<(f64, u32)> = (NUM_SPECIALS..12).map(|i| (p[i], i as u32)).collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let want: Vec<u32> = all.iter().take(3).map(|x| x.1).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn top_p_full_mass_is_whole_vocabulary() {
        let p = probs(12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = sample_from(&NegativeSampling::BaselineTopP { p: 1.0, cap: 12 }, 12, Some(&p), &mut rng).unwrap();
        assert_eq!(got, ranked_words(&p));
        assert_eq!(got.len(), 12 - NUM_SPECIALS);
    }

    #[test]
    fn top_p_stops_at_mass_and_cap() {
        let mut p = vec![0.0; 10];
        p[5] = 0.5;
        p[6] = 0.3;
        p[7] = 0.1;
        p[8] = 0.06;
        p[9] = 0.04;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = |p_: f64, cap| NegativeSampling::BaselineTopP { p: p_, cap };
        assert_eq!(sample_from(&s(0.5, 64), 10, Some(&p), &mut rng).unwrap(), vec![5]);
        assert_eq!(sample_from(&s(0.85, 64), 10, Some(&p), &mut rng).unwrap(), vec![5, 6, 7]);
        assert_eq!(sample_from(&s(0.99, 2), 10, Some(&p), &mut rng).unwrap(), vec![5, 6]);
    }

    #[test]
    fn uniform_is_uniform_over_regular_words() {
        // Vocabulary of 10 regular words after the specials; 100k draws put
        // each frequency within 0.01 of 0.1 (sd ~0.00095).
        let size = NUM_SPECIALS + 10;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = sample_from::<f64, _>(&NegativeSampling::UniformRandom { k: 100_000 }, size, None, &mut rng).unwrap();
        let mut counts = vec![0usize; size];
        for w in draws {
            counts[w as usize] += 1;
        }
        assert!(counts[..NUM_SPECIALS].iter().all(|&c| c == 0));
        for &c in &counts[NUM_SPECIALS..] {
            assert!((c as f64 / 100_000.0 - 0.1).abs() < 0.01);
        }
    }

    #[test]
    fn baseline_random_follows_distribution_and_skips_specials() {
        let mut p = vec![0.2; 8];
        p[5] = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = sample_from(&NegativeSampling::BaselineRandom { k: 20_000 }, 8, Some(&p), &mut rng).unwrap();
        assert!(draws.iter().all(|&w| w == 6 || w == 7));
        let sixes = draws.iter().filter(|&&w| w == 6).count() as f64 / 20_000.0;
        assert!((sixes - 0.5).abs() < 0.02);
    }

    #[test]
    fn pool_restricts_baseline_proposals() {
        let p = probs(12, 7);
        let pool = [9, 6, 11, 7];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let top = sample_within(&NegativeSampling::BaselineTopK { k: 8 }, 12, Some(&p), Some(&pool), &mut rng).unwrap();
        let mut want = pool.to_vec();
        want.sort_by(|&a, &b| p[b as usize].partial_cmp(&p[a as usize]).unwrap());
        assert_eq!(top, want);

        let all = sample_within(&NegativeSampling::BaselineTopP { p: 1.0, cap: 64 }, 12, Some(&p), Some(&pool), &mut rng).unwrap();
        assert_eq!(all, want);

        let draws = sample_within(&NegativeSampling::BaselineRandom { k: 2000 }, 12, Some(&p), Some(&pool), &mut rng).unwrap();
        assert!(draws.iter().all(|w| pool.contains(w)));

        // uniform draws ignore the pool
        let uniform = sample_within::<f64, _>(&NegativeSampling::UniformRandom { k: 2000 }, 12, None, Some(&pool), &mut rng).unwrap();
        assert!(uniform.iter().any(|w| !pool.contains(w)));

        let empty = sample_within(&NegativeSampling::BaselineTopK { k: 2 }, 12, Some(&p), Some(&[1, 2]), &mut rng);
        assert!(empty.is_err());
    }

    #[test]
    fn baseline_strategies_require_a_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_from::<f64, _>(&NegativeSampling::BaselineTopK { k: 2 }, 10, None, &mut rng);
        assert!(matches!(err, Err(WlacError::MissingBaseline(_))));
    }

    #[test]
    fn parse_specs() {
        assert_eq!(NegativeSampling::parse("topk:8").unwrap(), NegativeSampling::BaselineTopK { k: 8 });
        assert_eq!(
            NegativeSampling::parse("topp:0.9").unwrap(),
            NegativeSampling::BaselineTopP { p: 0.9, cap: DEFAULT_TOP_P_CAP }
        );
        assert_eq!(
            NegativeSampling::parse("topp:0.5:10").unwrap(),
            NegativeSampling::BaselineTopP { p: 0.5, cap: 10 }
        );
        assert!(NegativeSampling::parse("uniform:0").is_err());
        assert!(NegativeSampling::parse("topp:1.5").is_err());
        assert!(NegativeSampling::parse("topk:3:1").is_err());
        assert!(NegativeSampling::parse("beam:3").is_err());
    }
}
