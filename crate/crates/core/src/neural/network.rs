//! Source encoder, bidirectional target encoder and the two output heads.
//!
//! Both stacks are pre-norm Transformer blocks. Target blocks run
//! unmasked self-attention, then cross-attention to the source, then the
//! feed-forward layer. Several target sequences may attend to the same
//! source sequence, which is how candidate words share one source encoding.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::RngCore;

use super::ops::{
    apply_mask, attention, attention_backward, dropout, layer_norm, layer_norm_backward, linear,
    linear_backward, relu_backward_in_place, relu_in_place, AttnCache, AttnLayout, NormCache,
};
use super::params::{DecoderSlot, EncoderSlot, HeadKind, Model};
use super::Scalar;
use crate::error::{Result, WlacError};

/// Variable-length sequences packed row-wise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub src_tokens: Vec<u32>,
    pub src_offsets: Vec<usize>,
    pub tgt_tokens: Vec<u32>,
    pub tgt_offsets: Vec<usize>,
    /// Source sequence attended by each target sequence.
    pub tgt_src: Vec<usize>,
}

impl Default for PackedBatch {
    fn default() -> Self {
        Self::new()
    }
}

impl PackedBatch {
    pub fn new() -> Self {
        PackedBatch {
            src_tokens: Vec::new(),
            src_offsets: vec![0],
            tgt_tokens: Vec::new(),
            tgt_offsets: vec![0],
            tgt_src: Vec::new(),
        }
    }

    pub fn add_source(&mut self, ids: &[u32]) -> usize {
        self.src_tokens.extend_from_slice(ids);
        self.src_offsets.push(self.src_tokens.len());
        self.src_offsets.len() - 2
    }

    pub fn add_target(&mut self, ids: &[u32], source: usize) -> usize {
        self.tgt_tokens.extend_from_slice(ids);
        self.tgt_offsets.push(self.tgt_tokens.len());
        self.tgt_src.push(source);
        self.tgt_offsets.len() - 2
    }

    pub fn num_sources(&self) -> usize {
        self.src_offsets.len() - 1
    }

    pub fn num_targets(&self) -> usize {
        self.tgt_offsets.len() - 1
    }

    /// Packed row of position `pos` in target sequence `seq`.
    pub fn target_row(&self, seq: usize, pos: usize) -> usize {
        self.tgt_offsets[seq] + pos
    }

    pub fn token_count(&self) -> usize {
        self.src_tokens.len() + self.tgt_tokens.len()
    }
}

struct EncoderCache<F> {
    ln1: NormCache<F>,
    a_in: Array2<F>,
    attn: AttnCache<F>,
    drop1: Option<Array2<F>>,
    ln2: NormCache<F>,
    f_in: Array2<F>,
    hidden: Array2<F>,
    drop2: Option<Array2<F>>,
}

struct DecoderCache<F> {
    ln1: NormCache<F>,
    a_in: Array2<F>,
    self_attn: AttnCache<F>,
    drop1: Option<Array2<F>>,
    ln2: NormCache<F>,
    c_in: Array2<F>,
    cross: AttnCache<F>,
    drop2: Option<Array2<F>>,
    ln3: NormCache<F>,
    f_in: Array2<F>,
    hidden: Array2<F>,
    drop3: Option<Array2<F>>,
}

/// Outputs of one forward pass plus everything backward needs.
pub struct ForwardPass<F> {
    pub src_states: Array2<F>,
    pub tgt_states: Array2<F>,
    src_drop: Option<Array2<F>>,
    tgt_drop: Option<Array2<F>>,
    enc: Vec<EncoderCache<F>>,
    src_norm: NormCache<F>,
    dec: Vec<DecoderCache<F>>,
    tgt_norm: NormCache<F>,
    identity_src: Vec<usize>,
    identity_tgt: Vec<usize>,
}

impl<F> ForwardPass<F> {
    /// Cross-attention weights of `layer`, `head` for target sequence `seq`:
    /// one row per target position, one column per source position.
    pub fn cross_attention(&self, layer: usize, seq: usize, head: usize, heads: usize) -> &Array2<F> {
        &self.dec[layer].cross.probs[seq * heads + head]
    }

    /// Self-attention weights of a target layer.
    pub fn target_self_attention(&self, layer: usize, seq: usize, head: usize, heads: usize) -> &Array2<F> {
        &self.dec[layer].self_attn.probs[seq * heads + head]
    }

    pub fn source_self_attention(&self, layer: usize, seq: usize, head: usize, heads: usize) -> &Array2<F> {
        &self.enc[layer].attn.probs[seq * heads + head]
    }

    pub fn num_target_layers(&self) -> usize {
        self.dec.len()
    }

    pub fn num_source_layers(&self) -> usize {
        self.enc.len()
    }
}

fn check_sequences(tokens: &[u32], offsets: &[usize], vocab: usize, max_len: usize) -> Result<()> {
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(WlacError::IdOutOfRange { id, size: vocab });
    }
    for w in offsets.windows(2) {
        let len = w[1] - w[0];
        if len == 0 {
            return Err(WlacError::InvalidArgument("empty sequence".into()));
        }
        if len > max_len {
            return Err(WlacError::SequenceTooLong { len, max_len });
        }
    }
    Ok(())
}

impl<F: Scalar> Model<F> {
    pub fn validate_batch(&self, batch: &PackedBatch) -> Result<()> {
        let c = &self.config;
        check_sequences(&batch.src_tokens, &batch.src_offsets, c.src_vocab_size, c.max_len)?;
        check_sequences(&batch.tgt_tokens, &batch.tgt_offsets, c.tgt_vocab_size, c.max_len)?;
        if batch.tgt_src.iter().any(|&s| s >= batch.num_sources()) {
            return Err(WlacError::InvalidArgument(
                "target refers to a missing source".into(),
            ));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32], offsets: &[usize], table: usize) -> Array2<F> {
        let d = self.config.d_model;
        let emb = self.layout.mat(&self.data, table);
        let scale = F::from_usize(d).unwrap().sqrt();
        let mut x = Array2::zeros((tokens.len(), d));
        for w in offsets.windows(2) {
            for (pos, row) in (w[0]..w[1]).enumerate() {
                let mut out = x.row_mut(row);
                out.assign(&emb.row(tokens[row] as usize));
                out *= scale;
                out += &self.positions.row(pos);
            }
        }
        x
    }

    fn embed_backward(&self, tokens: &[u32], dx: &Array2<F>, table: usize, grads: &mut [F]) {
        let scale = F::from_usize(self.config.d_model).unwrap().sqrt();
        let mut g = self.layout.mat_mut(grads, table);
        for (row, &tok) in tokens.iter().enumerate() {
            g.row_mut(tok as usize).scaled_add(scale, &dx.row(row));
        }
    }

    fn encoder_layer(
        &self,
        slot: &EncoderSlot,
        x: Array2<F>,
        layout: &AttnLayout,
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> (Array2<F>, EncoderCache<F>) {
        let l = &self.layout;
        let p = self.config.dropout;
        let (a_in, ln1) = layer_norm(&x, &l.vec(&self.data, slot.ln1.gamma), &l.vec(&self.data, slot.ln1.beta));
        let weights = l.attn(&self.data, &slot.attn);
        let (mut a_out, attn) = attention(&a_in.view(), &a_in.view(), &weights, layout, self.config.n_heads);
        let drop1 = dropout(&mut a_out, p, rng.as_deref_mut());
        let x = x + &a_out;
        let (f_in, ln2) = layer_norm(&x, &l.vec(&self.data, slot.ln2.gamma), &l.vec(&self.data, slot.ln2.beta));
        let mut hidden = linear(&f_in.view(), &l.mat(&self.data, slot.ff1.w), &l.vec(&self.data, slot.ff1.b));
        relu_in_place(&mut hidden);
        let mut f_out = linear(&hidden.view(), &l.mat(&self.data, slot.ff2.w), &l.vec(&self.data, slot.ff2.b));
        let drop2 = dropout(&mut f_out, p, rng.as_deref_mut());
        let y = x + &f_out;
        (
            y,
            EncoderCache {
                ln1,
                a_in,
                attn,
                drop1,
                ln2,
                f_in,
                hidden,
                drop2,
            },
        )
    }

    fn encoder_layer_backward(
        &self,
        slot: &EncoderSlot,
        cache: &EncoderCache<F>,
        layout: &AttnLayout,
        mut dx: Array2<F>,
        grads: &mut [F],
    ) -> Array2<F> {
        let l = &self.layout;
        let d = &self.data;
        let d_fout = apply_mask(&dx, &cache.drop2);
        let mut dh = {
            let (mut gw, mut gb) = l.linear_mut(grads, &slot.ff2);
            linear_backward(&cache.hidden.view(), &l.mat(d, slot.ff2.w), &d_fout.view(), &mut gw, &mut gb)
        };
        relu_backward_in_place(&cache.hidden, &mut dh);
        let d_fin = {
            let (mut gw, mut gb) = l.linear_mut(grads, &slot.ff1);
            linear_backward(&cache.f_in.view(), &l.mat(d, slot.ff1.w), &dh.view(), &mut gw, &mut gb)
        };
        {
            let (mut gg, mut gb) = l.norm_mut(grads, &slot.ln2);
            dx += &layer_norm_backward(&cache.ln2, &l.vec(d, slot.ln2.gamma), &d_fin, &mut gg, &mut gb);
        }
        let d_aout = apply_mask(&dx, &cache.drop1);
        let (dq, dkv) = {
            let weights = l.attn(d, &slot.attn);
            let mut g = l.attn_mut(grads, &slot.attn);
            attention_backward(
                &cache.a_in.view(),
                &cache.a_in.view(),
                &weights,
                &mut g,
                layout,
                self.config.n_heads,
                &cache.attn,
                &d_aout,
            )
        };
        let d_ain = dq + &dkv;
        let (mut gg, mut gb) = l.norm_mut(grads, &slot.ln1);
        dx += &layer_norm_backward(&cache.ln1, &l.vec(d, slot.ln1.gamma), &d_ain, &mut gg, &mut gb);
        dx
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        slot: &DecoderSlot,
        x: Array2<F>,
        src: &Array2<F>,
        self_layout: &AttnLayout,
        cross_layout: &AttnLayout,
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> (Array2<F>, DecoderCache<F>) {
        let l = &self.layout;
        let d = &self.data;
        let p = self.config.dropout;
        let heads = self.config.n_heads;
        let (a_in, ln1) = layer_norm(&x, &l.vec(d, slot.ln1.gamma), &l.vec(d, slot.ln1.beta));
        let (mut a_out, self_attn) =
            attention(&a_in.view(), &a_in.view(), &l.attn(d, &slot.self_attn), self_layout, heads);
        let drop1 = dropout(&mut a_out, p, rng.as_deref_mut());
        let x = x + &a_out;
        let (c_in, ln2) = layer_norm(&x, &l.vec(d, slot.ln2.gamma), &l.vec(d, slot.ln2.beta));
        let (mut c_out, cross) =
            attention(&c_in.view(), &src.view(), &l.attn(d, &slot.cross_attn), cross_layout, heads);
        let drop2 = dropout(&mut c_out, p, rng.as_deref_mut());
        let x = x + &c_out;
        let (f_in, ln3) = layer_norm(&x, &l.vec(d, slot.ln3.gamma), &l.vec(d, slot.ln3.beta));
        let mut hidden = linear(&f_in.view(), &l.mat(d, slot.ff1.w), &l.vec(d, slot.ff1.b));
        relu_in_place(&mut hidden);
        let mut f_out = linear(&hidden.view(), &l.mat(d, slot.ff2.w), &l.vec(d, slot.ff2.b));
        let drop3 = dropout(&mut f_out, p, rng.as_deref_mut());
        let y = x + &f_out;
        (
            y,
            DecoderCache {
                ln1,
                a_in,
                self_attn,
                drop1,
                ln2,
                c_in,
                cross,
                drop2,
                ln3,
                f_in,
                hidden,
                drop3,
            },
        )
    }

    /// Returns the gradient w.r.t. the layer input; source-state gradients
    /// are accumulated into `d_src`.
    #[allow(clippy::too_many_arguments)]
    fn decoder_layer_backward(
        &self,
        slot: &DecoderSlot,
        cache: &DecoderCache<F>,
        src: &Array2<F>,
        self_layout: &AttnLayout,
        cross_layout: &AttnLayout,
        mut dx: Array2<F>,
        d_src: &mut Array2<F>,
        grads: &mut [F],
    ) -> Array2<F> {
        let l = &self.layout;
        let d = &self.data;
        let heads = self.config.n_heads;
        let d_fout = apply_mask(&dx, &cache.drop3);
        let mut dh = {
            let (mut gw, mut gb) = l.linear_mut(grads, &slot.ff2);
            linear_backward(&cache.hidden.view(), &l.mat(d, slot.ff2.w), &d_fout.view(), &mut gw, &mut gb)
        };
        relu_backward_in_place(&cache.hidden, &mut dh);
        let d_fin = {
            let (mut gw, mut gb) = l.linear_mut(grads, &slot.ff1);
            linear_backward(&cache.f_in.view(), &l.mat(d, slot.ff1.w), &dh.view(), &mut gw, &mut gb)
        };
        {
            let (mut gg, mut gb) = l.norm_mut(grads, &slot.ln3);
            dx += &layer_norm_backward(&cache.ln3, &l.vec(d, slot.ln3.gamma), &d_fin, &mut gg, &mut gb);
        }
        let d_cout = apply_mask(&dx, &cache.drop2);
        let (d_cin, d_kv) = {
            let weights = l.attn(d, &slot.cross_attn);
            let mut g = l.attn_mut(grads, &slot.cross_attn);
            attention_backward(
                &cache.c_in.view(),
                &src.view(),
                &weights,
                &mut g,
                cross_layout,
                heads,
                &cache.cross,
                &d_cout,
            )
        };
        *d_src += &d_kv;
        {
            let (mut gg, mut gb) = l.norm_mut(grads, &slot.ln2);
            dx += &layer_norm_backward(&cache.ln2, &l.vec(d, slot.ln2.gamma), &d_cin, &mut gg, &mut gb);
        }
        let d_aout = apply_mask(&dx, &cache.drop1);
        let (dq, dkv) = {
            let weights = l.attn(d, &slot.self_attn);
            let mut g = l.attn_mut(grads, &slot.self_attn);
            attention_backward(
                &cache.a_in.view(),
                &cache.a_in.view(),
                &weights,
                &mut g,
                self_layout,
                heads,
                &cache.self_attn,
                &d_aout,
            )
        };
        let d_ain = dq + &dkv;
        let (mut gg, mut gb) = l.norm_mut(grads, &slot.ln1);
        dx += &layer_norm_backward(&cache.ln1, &l.vec(d, slot.ln1.gamma), &d_ain, &mut gg, &mut gb);
        dx
    }

    /// Runs both encoders. Dropout is active only when `rng` is given.
    pub fn forward(&self, batch: &PackedBatch, mut rng: Option<&mut (dyn RngCore + '_)>) -> Result<ForwardPass<F>> {
        self.validate_batch(batch)?;
        let slots = &self.layout.slots;
        let p = self.config.dropout;
        let identity_src: Vec<usize> = (0..batch.num_sources()).collect();
        let identity_tgt: Vec<usize> = (0..batch.num_targets()).collect();

        let mut x = self.embed(&batch.src_tokens, &batch.src_offsets, slots.src_embed);
        let src_drop = dropout(&mut x, p, rng.as_deref_mut());
        let src_layout = AttnLayout {
            q_offsets: &batch.src_offsets,
            kv_offsets: &batch.src_offsets,
            kv_of: &identity_src,
        };
        let mut enc = Vec::with_capacity(slots.src_layers.len());
        for slot in &slots.src_layers {
            let (y, cache) = self.encoder_layer(slot, x, &src_layout, rng.as_deref_mut());
            enc.push(cache);
            x = y;
        }
        let l = &self.layout;
        let (src_states, src_norm) = layer_norm(
            &x,
            &l.vec(&self.data, slots.src_norm.gamma),
            &l.vec(&self.data, slots.src_norm.beta),
        );

        let mut y = self.embed(&batch.tgt_tokens, &batch.tgt_offsets, slots.tgt_embed);
        let tgt_drop = dropout(&mut y, p, rng.as_deref_mut());
        let self_layout = AttnLayout {
            q_offsets: &batch.tgt_offsets,
            kv_offsets: &batch.tgt_offsets,
            kv_of: &identity_tgt,
        };
        let cross_layout = AttnLayout {
            q_offsets: &batch.tgt_offsets,
            kv_offsets: &batch.src_offsets,
            kv_of: &batch.tgt_src,
        };
        let mut dec = Vec::with_capacity(slots.tgt_layers.len());
        for slot in &slots.tgt_layers {
            let (out, cache) =
                self.decoder_layer(slot, y, &src_states, &self_layout, &cross_layout, rng.as_deref_mut());
            dec.push(cache);
            y = out;
        }
        let (tgt_states, tgt_norm) = layer_norm(
            &y,
            &l.vec(&self.data, slots.tgt_norm.gamma),
            &l.vec(&self.data, slots.tgt_norm.beta),
        );
        Ok(ForwardPass {
            src_states,
            tgt_states,
            src_drop,
            tgt_drop,
            enc,
            src_norm,
            dec,
            tgt_norm,
            identity_src,
            identity_tgt,
        })
    }

    /// Backpropagates `d_tgt` (gradient w.r.t. final target states) through
    /// both encoders, accumulating into `grads`.
    pub fn backward(&self, batch: &PackedBatch, pass: &ForwardPass<F>, d_tgt: &Array2<F>, grads: &mut [F]) {
        assert_eq!(grads.len(), self.data.len(), "gradient buffer size");
        let l = &self.layout;
        let slots = &l.slots;
        let d = &self.data;
        let self_layout = AttnLayout {
            q_offsets: &batch.tgt_offsets,
            kv_offsets: &batch.tgt_offsets,
            kv_of: &pass.identity_tgt,
        };
        let cross_layout = AttnLayout {
            q_offsets: &batch.tgt_offsets,
            kv_offsets: &batch.src_offsets,
            kv_of: &batch.tgt_src,
        };
        let mut dy = {
            let (mut gg, mut gb) = l.norm_mut(grads, &slots.tgt_norm);
            layer_norm_backward(&pass.tgt_norm, &l.vec(d, slots.tgt_norm.gamma), d_tgt, &mut gg, &mut gb)
        };
        let mut d_src = Array2::zeros(pass.src_states.dim());
        for (slot, cache) in slots.tgt_layers.iter().zip(&pass.dec).rev() {
            dy = self.decoder_layer_backward(
                slot,
                cache,
                &pass.src_states,
                &self_layout,
                &cross_layout,
                dy,
                &mut d_src,
                grads,
            );
        }
        let dy = apply_mask(&dy, &pass.tgt_drop);
        self.embed_backward(&batch.tgt_tokens, &dy, slots.tgt_embed, grads);

        let src_layout = AttnLayout {
            q_offsets: &batch.src_offsets,
            kv_offsets: &batch.src_offsets,
            kv_of: &pass.identity_src,
        };
        let mut dx = {
            let (mut gg, mut gb) = l.norm_mut(grads, &slots.src_norm);
            layer_norm_backward(&pass.src_norm, &l.vec(d, slots.src_norm.gamma), &d_src, &mut gg, &mut gb)
        };
        for (slot, cache) in slots.src_layers.iter().zip(&pass.enc).rev() {
            dx = self.encoder_layer_backward(slot, cache, &src_layout, dx, grads);
        }
        let dx = apply_mask(&dx, &pass.src_drop);
        self.embed_backward(&batch.src_tokens, &dx, slots.src_embed, grads);
    }

    fn require_head(&self, kind: HeadKind) {
        assert_eq!(self.head, kind, "model has a {:?} head", self.head);
    }

    /// `M h` for every row of `states`: shape `(rows, tgt_vocab)`.
    pub fn vocab_logits(&self, states: &ArrayView2<F>) -> Array2<F> {
        self.require_head(HeadKind::Vocab);
        let m = self.layout.mat(&self.data, self.layout.slots.head);
        states.dot(&m.t())
    }

    pub fn vocab_logits_backward(&self, states: &ArrayView2<F>, d_logits: &Array2<F>, grads: &mut [F]) -> Array2<F> {
        self.require_head(HeadKind::Vocab);
        let id = self.layout.slots.head;
        let m = self.layout.mat(&self.data, id);
        let mut gm = self.layout.mat_mut(grads, id);
        ndarray::linalg::general_mat_mul(F::one(), &d_logits.t(), states, F::one(), &mut gm);
        d_logits.dot(&m)
    }

    /// `theta . h` for every row of `states` (pre-sigmoid).
    pub fn score_logits(&self, states: &ArrayView2<F>) -> Array1<F> {
        self.require_head(HeadKind::Score);
        let theta = self.layout.vec(&self.data, self.layout.slots.head);
        states.dot(&theta)
    }

    pub fn score_logits_backward(&self, states: &ArrayView2<F>, d_z: &Array1<F>, grads: &mut [F]) -> Array2<F> {
        self.require_head(HeadKind::Score);
        let id = self.layout.slots.head;
        let theta: ArrayView1<F> = self.layout.vec(&self.data, id);
        let mut gt = self.layout.vec_mut(grads, id);
        gt += &states.t().dot(d_z);
        let mut d_states = Array2::zeros(states.dim());
        for (mut row, &g) in d_states.outer_iter_mut().zip(d_z.iter()) {
            row.assign(&(&theta * g));
        }
        d_states
    }

    /// Mean over heads of the last target layer's cross-attention at one
    /// target position: a distribution over source positions.
    pub fn probe_attention(&self, pass: &ForwardPass<F>, seq: usize, pos: usize) -> Vec<F> {
        let heads = self.config.n_heads;
        let layer = pass.num_target_layers() - 1;
        let mut acc: Option<Array1<F>> = None;
        for h in 0..heads {
            let row = pass.cross_attention(layer, seq, h, heads).row(pos).to_owned();
            acc = Some(match acc {
                Some(a) => a + &row,
                None => row,
            });
        }
        let inv = F::one() / F::from_usize(heads).unwrap();
        acc.map(|a| (a * inv).to_vec()).unwrap_or_default()
    }
}

/// Copies the listed rows of `states` into a new matrix.
pub fn gather_rows<F: Scalar>(states: &Array2<F>, rows: &[usize]) -> Array2<F> {
    states.select(Axis(0), rows)
}

/// Adds each row of `d_rows` into row `rows[i]` of a zero matrix of `n` rows.
pub fn scatter_rows<F: Scalar>(d_rows: &Array2<F>, rows: &[usize], n: usize) -> Array2<F> {
    let mut out = Array2::zeros((n, d_rows.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        let mut dst = out.slice_mut(s![r, ..]);
        dst += &d_rows.row(i);
    }
    out
}
