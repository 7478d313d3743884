//! Flat parameter storage with a named layout.
//!
//! All parameters live in one contiguous buffer; the layout records name,
//! shape and offset of every array so that optimizers, checkpoints and
//! gradient checks can treat the model as a single vector.

use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::ops::AttnWeights;
use super::ops::AttnGrads;
use super::{ModelConfig, Scalar};
use crate::error::{Result, WlacError};

/// Output head of the shared backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Embedding matrix `M` of shape `(tgt_vocab, d_model)`; logits are `M h`.
    Vocab,
    /// Weight vector `theta` of length `d_model`; score is `sigmoid(theta . h)`.
    Score,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearSlot {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct NormSlot {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnSlot {
    pub q: LinearSlot,
    pub k: LinearSlot,
    pub v: LinearSlot,
    pub o: LinearSlot,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderSlot {
    pub ln1: NormSlot,
    pub attn: AttnSlot,
    pub ln2: NormSlot,
    pub ff1: LinearSlot,
    pub ff2: LinearSlot,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderSlot {
    pub ln1: NormSlot,
    pub self_attn: AttnSlot,
    pub ln2: NormSlot,
    pub cross_attn: AttnSlot,
    pub ln3: NormSlot,
    pub ff1: LinearSlot,
    pub ff2: LinearSlot,
}

#[derive(Debug, Clone)]
pub struct Slots {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub src_layers: Vec<EncoderSlot>,
    pub src_norm: NormSlot,
    pub tgt_layers: Vec<DecoderSlot>,
    pub tgt_norm: NormSlot,
    pub head: usize,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub slots: Slots,
    pub total: usize,
}

struct Builder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> usize {
        let len = shape.iter().product();
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            offset: self.total,
            len,
        });
        self.total += len;
        self.entries.len() - 1
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> LinearSlot {
        LinearSlot {
            w: self.add(format!("{prefix}.w"), &[input, output]),
            b: self.add(format!("{prefix}.b"), &[output]),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormSlot {
        NormSlot {
            gamma: self.add(format!("{prefix}.gamma"), &[d]),
            beta: self.add(format!("{prefix}.beta"), &[d]),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnSlot {
        AttnSlot {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }
}

impl ParamLayout {
    pub fn new(config: &ModelConfig, head: HeadKind) -> Self {
        let d = config.d_model;
        let f = config.d_ffn;
        let mut b = Builder {
            entries: Vec::new(),
            total: 0,
        };
        let src_embed = b.add("src.embed".into(), &[config.src_vocab_size, d]);
        let tgt_embed = b.add("tgt.embed".into(), &[config.tgt_vocab_size, d]);
        let src_layers = (0..config.n_src_layers)
            .map(|i| {
                let p = format!("src.layer{i}");
                EncoderSlot {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    attn: b.attn(&format!("{p}.attn"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    ff1: b.linear(&format!("{p}.ffn.in"), d, f),
                    ff2: b.linear(&format!("{p}.ffn.out"), f, d),
                }
            })
            .collect();
        let src_norm = b.norm("src.final_ln", d);
        let tgt_layers = (0..config.n_tgt_layers)
            .map(|i| {
                let p = format!("tgt.layer{i}");
                DecoderSlot {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    self_attn: b.attn(&format!("{p}.self"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    cross_attn: b.attn(&format!("{p}.cross"), d),
                    ln3: b.norm(&format!("{p}.ln3"), d),
                    ff1: b.linear(&format!("{p}.ffn.in"), d, f),
                    ff2: b.linear(&format!("{p}.ffn.out"), f, d),
                }
            })
            .collect();
        let tgt_norm = b.norm("tgt.final_ln", d);
        let head = match head {
            HeadKind::Vocab => b.add("head.vocab".into(), &[config.tgt_vocab_size, d]),
            HeadKind::Score => b.add("head.theta".into(), &[d]),
        };
        ParamLayout {
            entries: b.entries,
            total: b.total,
            slots: Slots {
                src_embed,
                tgt_embed,
                src_layers,
                src_norm,
                tgt_layers,
                tgt_norm,
                head,
            },
        }
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn range(&self, id: usize) -> std::ops::Range<usize> {
        let e = &self.entries[id];
        e.offset..e.offset + e.len
    }

    pub fn mat<'a, F>(&self, data: &'a [F], id: usize) -> ArrayView2<'a, F> {
        let e = &self.entries[id];
        ArrayView2::from_shape((e.shape[0], e.shape[1]), &data[e.offset..e.offset + e.len])
            .expect("layout shape")
    }

    pub fn vec<'a, F>(&self, data: &'a [F], id: usize) -> ArrayView1<'a, F> {
        ArrayView1::from(&data[self.range(id)])
    }

    pub fn mat_mut<'a, F>(&self, data: &'a mut [F], id: usize) -> ArrayViewMut2<'a, F> {
        let e = &self.entries[id];
        ArrayViewMut2::from_shape(
            (e.shape[0], e.shape[1]),
            &mut data[e.offset..e.offset + e.len],
        )
        .expect("layout shape")
    }

    pub fn vec_mut<'a, F>(&self, data: &'a mut [F], id: usize) -> ArrayViewMut1<'a, F> {
        let r = self.range(id);
        ArrayViewMut1::from(&mut data[r])
    }

    pub fn attn<'a, F>(&self, data: &'a [F], a: &AttnSlot) -> AttnWeights<'a, F> {
        AttnWeights {
            wq: self.mat(data, a.q.w),
            bq: self.vec(data, a.q.b),
            wk: self.mat(data, a.k.w),
            bk: self.vec(data, a.k.b),
            wv: self.mat(data, a.v.w),
            bv: self.vec(data, a.v.b),
            wo: self.mat(data, a.o.w),
            bo: self.vec(data, a.o.b),
        }
    }

    /// Weight and bias gradient views of one linear layer.
    pub fn linear_mut<'a, F>(
        &self,
        data: &'a mut [F],
        slot: &LinearSlot,
    ) -> (ArrayViewMut2<'a, F>, ArrayViewMut1<'a, F>) {
        let w = &self.entries[slot.w];
        let b = &self.entries[slot.b];
        debug_assert_eq!(w.offset + w.len, b.offset);
        let (ws, bs) = data[w.offset..b.offset + b.len].split_at_mut(w.len);
        (
            ArrayViewMut2::from_shape((w.shape[0], w.shape[1]), ws).expect("layout shape"),
            ArrayViewMut1::from(bs),
        )
    }

    pub fn norm_mut<'a, F>(
        &self,
        data: &'a mut [F],
        slot: &NormSlot,
    ) -> (ArrayViewMut1<'a, F>, ArrayViewMut1<'a, F>) {
        let g = &self.entries[slot.gamma];
        let b = &self.entries[slot.beta];
        debug_assert_eq!(g.offset + g.len, b.offset);
        let (gs, bs) = data[g.offset..b.offset + b.len].split_at_mut(g.len);
        (ArrayViewMut1::from(gs), ArrayViewMut1::from(bs))
    }

    /// Mutable gradient views for one attention block. The eight arrays are
    /// disjoint and laid out contiguously in q, k, v, o order.
    pub fn attn_mut<'a, F>(&self, data: &'a mut [F], a: &AttnSlot) -> AttnGrads<'a, F> {
        let start = self.entries[a.q.w].offset;
        let end = self.range(a.o.b).end;
        let mut rest = &mut data[start..end];
        let mut take = |id: usize| {
            let len = self.entries[id].len;
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(len);
            rest = tail;
            head
        };
        let d = self.entries[a.q.w].shape[0];
        let wq = take(a.q.w);
        let bq = take(a.q.b);
        let wk = take(a.k.w);
        let bk = take(a.k.b);
        let wv = take(a.v.w);
        let bv = take(a.v.b);
        let wo = take(a.o.w);
        let bo = take(a.o.b);
        let m = |s: &'a mut [F]| ArrayViewMut2::from_shape((d, d), s).expect("square projection");
        AttnGrads {
            wq: m(wq),
            bq: ArrayViewMut1::from(bq),
            wk: m(wk),
            bk: ArrayViewMut1::from(bk),
            wv: m(wv),
            bv: ArrayViewMut1::from(bv),
            wo: m(wo),
            bo: ArrayViewMut1::from(bo),
        }
    }

    /// Entries belonging to the shared backbone (everything but the head).
    pub fn backbone_entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| !e.name.starts_with("head."))
    }
}

/// A model: configuration, head kind and one flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub head: HeadKind,
    pub layout: Arc<ParamLayout>,
    pub data: Vec<F>,
    pub(crate) positions: ndarray::Array2<F>,
}

impl<F: Scalar> Model<F> {
    pub fn zeros(config: &ModelConfig, head: HeadKind) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(ParamLayout::new(config, head));
        let data = vec![F::zero(); layout.total];
        Ok(Model {
            config: config.clone(),
            head,
            positions: super::ops::sinusoidal_table(config.max_len, config.d_model),
            layout,
            data,
        })
    }

    /// Random initialization: embeddings ~ N(0, 1/d), projections Xavier
    /// uniform, layer norms at identity, vocabulary head ~ N(0, 0.02^2) and a
    /// zero score vector.
    pub fn init(config: &ModelConfig, head: HeadKind, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config, head)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = model.layout.clone();
        let embed_std = (config.d_model as f64).powf(-0.5);
        for entry in &layout.entries {
            let slice = &mut model.data[entry.offset..entry.offset + entry.len];
            let name = entry.name.as_str();
            if name.ends_with(".embed") {
                let dist = Normal::new(0.0, embed_std).expect("finite std");
                for v in slice.iter_mut() {
                    *v = F::from_f64(dist.sample(&mut rng)).unwrap();
                }
            } else if name == "head.vocab" {
                let dist = Normal::new(0.0, 0.02).expect("finite std");
                for v in slice.iter_mut() {
                    *v = F::from_f64(dist.sample(&mut rng)).unwrap();
                }
            } else if name.ends_with(".gamma") {
                slice.fill(F::one());
            } else if name.ends_with(".w") {
                let (fan_in, fan_out) = (entry.shape[0], entry.shape[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                for v in slice.iter_mut() {
                    *v = F::from_f64(dist.sample(&mut rng)).unwrap();
                }
            }
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout
            .find(name)
            .map(|e| &self.data[e.offset..e.offset + e.len])
    }

    /// Copies every backbone array from `other`, leaving this model's head
    /// untouched. Fails when the shapes differ; dropout may differ.
    pub fn load_backbone_from(&mut self, other: &Model<F>) -> Result<()> {
        let shape = ModelConfig {
            dropout: self.config.dropout,
            ..other.config.clone()
        };
        if self.config != shape {
            return Err(WlacError::InvalidArgument(
                "backbone configurations differ".into(),
            ));
        }
        for entry in self.layout.clone().backbone_entries() {
            let src = other
                .layout
                .find(&entry.name)
                .ok_or_else(|| WlacError::InvalidArgument(format!("missing {}", entry.name)))?;
            self.data[entry.offset..entry.offset + entry.len]
                .copy_from_slice(&other.data[src.offset..src.offset + src.len]);
        }
        Ok(())
    }

    /// Same model with a different head; backbone copied, new head zeroed.
    pub fn with_head(&self, head: HeadKind) -> Result<Model<F>> {
        let mut out = Model::zeros(&self.config, head)?;
        out.load_backbone_from(self)?;
        if head == self.head {
            let id = self.layout.slots.head;
            let r = self.layout.range(id);
            out.data[r.clone()].copy_from_slice(&self.data[r]);
        }
        Ok(out)
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            head: self.head,
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
            positions: self.positions.mapv(|v| G::from_f64(v.to_f64().unwrap()).unwrap()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
