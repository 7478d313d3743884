//! Row-major layer primitives with hand-written backward passes.
//!
//! Activations are `(tokens, features)` matrices; sequences are packed one
//! after another and delimited by offset arrays.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::{Rng, RngCore};

use super::Scalar;

pub const LN_EPS: f64 = 1e-5;

pub fn linear<F: Scalar>(x: &ArrayView2<F>, w: &ArrayView2<F>, b: &ArrayView1<F>) -> Array2<F> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub fn linear_backward<F: Scalar>(
    x: &ArrayView2<F>,
    w: &ArrayView2<F>,
    dy: &ArrayView2<F>,
    gw: &mut ArrayViewMut2<F>,
    gb: &mut ArrayViewMut1<F>,
) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), dy, F::one(), gw);
    *gb += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub struct NormCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

pub fn layer_norm<F: Scalar>(
    x: &Array2<F>,
    gamma: &ArrayView1<F>,
    beta: &ArrayView1<F>,
) -> (Array2<F>, NormCache<F>) {
    let (n, d) = x.dim();
    let eps = F::from_f64(LN_EPS).unwrap();
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() * inv_d;
        let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        Zip::from(xhat.row_mut(i))
            .and(row)
            .for_each(|h, &v| *h = (v - mean) * r);
    }
    let mut y = &xhat * gamma;
    y += beta;
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward<F: Scalar>(
    cache: &NormCache<F>,
    gamma: &ArrayView1<F>,
    dy: &Array2<F>,
    ggamma: &mut ArrayViewMut1<F>,
    gbeta: &mut ArrayViewMut1<F>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    let inv_d = F::one() / F::from_usize(d).unwrap();
    *ggamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *gbeta += &dy.sum_axis(Axis(0));
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() * inv_d;
        let mean_dh_xh = dh.dot(&xh) * inv_d;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(dh)
            .and(xh)
            .for_each(|o, &g, &h| *o = r * (g - mean_dh - h * mean_dh_xh));
    }
    dx
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn log_sum_exp<F: Scalar>(values: &[F]) -> F {
    let max = values.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let sum = values.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn relu_in_place<F: Scalar>(x: &mut Array2<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Zeroes the gradient wherever the forward ReLU output was zero.
pub fn relu_backward_in_place<F: Scalar>(activated: &Array2<F>, grad: &mut Array2<F>) {
    Zip::from(grad)
        .and(activated)
        .for_each(|g, &a| {
            if a <= F::zero() {
                *g = F::zero();
            }
        });
}

/// Inverted dropout. Returns the scaling mask when anything was dropped.
pub fn dropout<F: Scalar>(x: &mut Array2<F>, p: f64, rng: Option<&mut (dyn RngCore + '_)>) -> Option<Array2<F>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = F::from_f64(1.0 / (1.0 - p)).unwrap();
    let mask = Array2::from_shape_fn(x.dim(), |_| {
        if rng.gen::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    });
    *x *= &mask;
    Some(mask)
}

pub fn apply_mask<F: Scalar>(grad: &Array2<F>, mask: &Option<Array2<F>>) -> Array2<F> {
    match mask {
        Some(m) => grad * m,
        None => grad.clone(),
    }
}

/// Sinusoidal position table of shape `(max_len, d_model)`.
pub fn sinusoidal_table<F: Scalar>(max_len: usize, d_model: usize) -> Array2<F> {
    Array2::from_shape_fn((max_len, d_model), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
        let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        F::from_f64(v).unwrap()
    })
}

/// Parameter views for one multi-head attention block.
pub struct AttnWeights<'a, F> {
    pub wq: ArrayView2<'a, F>,
    pub bq: ArrayView1<'a, F>,
    pub wk: ArrayView2<'a, F>,
    pub bk: ArrayView1<'a, F>,
    pub wv: ArrayView2<'a, F>,
    pub bv: ArrayView1<'a, F>,
    pub wo: ArrayView2<'a, F>,
    pub bo: ArrayView1<'a, F>,
}

/// How query sequences map onto key/value sequences.
pub struct AttnLayout<'a> {
    pub q_offsets: &'a [usize],
    pub kv_offsets: &'a [usize],
    /// Key/value sequence index per query sequence.
    pub kv_of: &'a [usize],
}

pub struct AttnCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    context: Array2<F>,
    /// Row-stochastic weights indexed by `seq * heads + head`.
    pub probs: Vec<Array2<F>>,
}

pub fn attention<F: Scalar>(
    xq: &ArrayView2<F>,
    xkv: &ArrayView2<F>,
    w: &AttnWeights<F>,
    layout: &AttnLayout,
    heads: usize,
) -> (Array2<F>, AttnCache<F>) {
    let q = linear(xq, &w.wq, &w.bq);
    let k = linear(xkv, &w.wk, &w.bk);
    let v = linear(xkv, &w.wv, &w.bv);
    let d = q.ncols();
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut context = Array2::zeros(q.dim());
    let n_seq = layout.q_offsets.len() - 1;
    let mut probs = Vec::with_capacity(n_seq * heads);
    for seq in 0..n_seq {
        let (q0, q1) = (layout.q_offsets[seq], layout.q_offsets[seq + 1]);
        let kv = layout.kv_of[seq];
        let (k0, k1) = (layout.kv_offsets[kv], layout.kv_offsets[kv + 1]);
        for h in 0..heads {
            let qh = q.slice(s![q0..q1, h * dh..(h + 1) * dh]);
            let kh = k.slice(s![k0..k1, h * dh..(h + 1) * dh]);
            let vh = v.slice(s![k0..k1, h * dh..(h + 1) * dh]);
            let mut p = qh.dot(&kh.t());
            p *= scale;
            for mut row in p.outer_iter_mut() {
                softmax_in_place(row.as_slice_mut().expect("contiguous row"));
            }
            let out = p.dot(&vh);
            context.slice_mut(s![q0..q1, h * dh..(h + 1) * dh]).assign(&out);
            probs.push(p);
        }
    }
    let y = linear(&context.view(), &w.wo, &w.bo);
    (
        y,
        AttnCache {
            q,
            k,
            v,
            context,
            probs,
        },
    )
}

pub struct AttnGrads<'a, F> {
    pub wq: ArrayViewMut2<'a, F>,
    pub bq: ArrayViewMut1<'a, F>,
    pub wk: ArrayViewMut2<'a, F>,
    pub bk: ArrayViewMut1<'a, F>,
    pub wv: ArrayViewMut2<'a, F>,
    pub bv: ArrayViewMut1<'a, F>,
    pub wo: ArrayViewMut2<'a, F>,
    pub bo: ArrayViewMut1<'a, F>,
}

/// Returns `(d_xq, d_xkv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Scalar>(
    xq: &ArrayView2<F>,
    xkv: &ArrayView2<F>,
    w: &AttnWeights<F>,
    g: &mut AttnGrads<F>,
    layout: &AttnLayout,
    heads: usize,
    cache: &AttnCache<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let dcontext = linear_backward(&cache.context.view(), &w.wo, &dy.view(), &mut g.wo, &mut g.bo);
    let d = cache.q.ncols();
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    let n_seq = layout.q_offsets.len() - 1;
    for seq in 0..n_seq {
        let (q0, q1) = (layout.q_offsets[seq], layout.q_offsets[seq + 1]);
        let kv = layout.kv_of[seq];
        let (k0, k1) = (layout.kv_offsets[kv], layout.kv_offsets[kv + 1]);
        for h in 0..heads {
            let p = &cache.probs[seq * heads + h];
            let qs = s![q0..q1, h * dh..(h + 1) * dh];
            let ks = s![k0..k1, h * dh..(h + 1) * dh];
            let dout = dcontext.slice(qs);
            let vh = cache.v.slice(ks);
            let mut dp = dout.dot(&vh.t());
            general_mat_mul(F::one(), &p.t(), &dout, F::one(), &mut dv.slice_mut(ks));
            // softmax backward: dS = P * (dP - rowsum(dP * P))
            for (mut drow, prow) in dp.outer_iter_mut().zip(p.outer_iter()) {
                let dot = drow.dot(&prow);
                Zip::from(&mut drow)
                    .and(&prow)
                    .for_each(|g, &pv| *g = pv * (*g - dot) * scale);
            }
            let kh = cache.k.slice(ks);
            let qh = cache.q.slice(qs);
            general_mat_mul(F::one(), &dp, &kh, F::one(), &mut dq.slice_mut(qs));
            general_mat_mul(F::one(), &dp.t(), &qh, F::one(), &mut dk.slice_mut(ks));
        }
    }
    let dxq = linear_backward(xq, &w.wq, &dq.view(), &mut g.wq, &mut g.bq);
    let mut dxkv = linear_backward(xkv, &w.wk, &dk.view(), &mut g.wk, &mut g.bk);
    dxkv += &linear_backward(xkv, &w.wv, &dv.view(), &mut g.wv, &mut g.bv);
    (dxq, dxkv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_sums_to_one_with_extreme_logits() {
        let p = softmax(&[1000.0f64, -1000.0, 0.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
        let u = softmax(&[0.0f32; 7]);
        assert!(u.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-7));
    }

    #[test]
    fn sigmoid_is_bounded_and_symmetric() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        for x in [-50.0f64, -3.0, 0.7, 40.0] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0 || x.abs() > 30.0);
            assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = array![[1.0f64, 2.0, 3.0, 4.0], [10.0, -10.0, 0.0, 5.0]];
        let g = Array1::ones(4);
        let b = Array1::zeros(4);
        let (y, _) = layer_norm(&x, &g.view(), &b.view());
        for row in y.outer_iter() {
            assert!(row.sum().abs() < 1e-9);
            assert!((row.dot(&row) / 4.0 - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn positions_differ() {
        let t: Array2<f64> = sinusoidal_table(4, 8);
        assert_eq!(t[[0, 0]], 0.0);
        assert_eq!(t[[0, 1]], 1.0);
        assert_ne!(t.row(1), t.row(2));
    }
}
