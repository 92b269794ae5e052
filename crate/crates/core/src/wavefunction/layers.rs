//! Network building blocks, each in an eager form (used for sampling and
//! evaluation, with incremental caches) and a recorded form (used for
//! gradients).

use ndarray::{s, Array2, ArrayView2};

use super::params::{CellIndex, GruIndex, HeadIndex, TransformerIndex};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, affine};
use crate::tensor::{Graph, TensorError, Var};

/// One GRU update for every row of `x` / `h`:
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
pub fn gru_step<T: Scalar>(
    x: ArrayView2<T>,
    h: ArrayView2<T>,
    p: &[Array2<T>],
    ix: &GruIndex,
) -> Array2<T> {
    let mut r = affine(x, p[ix.w_ir].view(), p[ix.b_ir].view());
    r += &affine(h, p[ix.w_hr].view(), p[ix.b_hr].view());
    let mut z = affine(x, p[ix.w_iz].view(), p[ix.b_iz].view());
    z += &affine(h, p[ix.w_hz].view(), p[ix.b_hz].view());
    let n_in = affine(x, p[ix.w_in].view(), p[ix.b_in].view());
    let n_hid = affine(h, p[ix.w_hn].view(), p[ix.b_hn].view());
    let mut out = h.to_owned();
    kernels::gru_combine(&mut out, &r, &z, &n_in, &n_hid);
    out
}

pub fn head_logits<T: Scalar>(h: ArrayView2<T>, p: &[Array2<T>], ix: &HeadIndex) -> Array2<T> {
    let hidden = affine(h, p[ix.w1].view(), p[ix.b1].view()).mapv_into(kernels::relu);
    affine(hidden.view(), p[ix.w2].view(), p[ix.b2].view())
}

/// Log-probabilities over all output states, one row per input row.
pub fn head_log_probs<T: Scalar>(h: ArrayView2<T>, p: &[Array2<T>], ix: &HeadIndex) -> Array2<T> {
    kernels::log_softmax_rows(head_logits(h, p, ix).view())
}

/// Conditional distribution produced from hidden states: relu layer, linear
/// layer, softmax.
pub fn rnn_conditional<T: Scalar>(h: ArrayView2<T>, p: &[Array2<T>], ix: &HeadIndex) -> Array2<T> {
    kernels::softmax_rows(head_logits(h, p, ix).view())
}

/// Keys and values of the positions consumed so far, one `rows x d_h`
/// matrix per position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache<T> {
    pub keys: Vec<Array2<T>>,
    pub values: Vec<Array2<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            keys: self.keys.iter().map(|k| kernels::select_rows(k, idx)).collect(),
            values: self.values.iter().map(|v| kernels::select_rows(v, idx)).collect(),
        }
    }
}

/// Causal multi-head self-attention followed by the output projection.
///
/// Without a cache `x` is one full sequence (`len x d_h`) and every row
/// attends to itself and earlier rows. With a cache `x` holds one new
/// position for each of `rows` independent sequences; its keys and values
/// are appended and each row attends over the cached prefix plus itself.
pub fn masked_multihead_attention<T: Scalar>(
    x: ArrayView2<T>,
    p: &[Array2<T>],
    ix: &CellIndex,
    heads: usize,
    cache: Option<&mut KvCache<T>>,
) -> Array2<T> {
    let q = affine(x, p[ix.wq].view(), p[ix.bq].view());
    let k = affine(x, p[ix.wk].view(), p[ix.bk].view());
    let v = affine(x, p[ix.wv].view(), p[ix.bv].view());
    let concat = match cache {
        None => kernels::causal_attention(q.view(), k.view(), v.view(), heads, x.nrows()).0,
        Some(cache) => {
            cache.keys.push(k);
            cache.values.push(v);
            attend_cached(&q, cache, heads)
        }
    };
    affine(concat.view(), p[ix.wo].view(), p[ix.bo].view())
}

fn attend_cached<T: Scalar>(q: &Array2<T>, cache: &KvCache<T>, heads: usize) -> Array2<T> {
    let (rows, width) = q.dim();
    let dk = width / heads;
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let positions = cache.len();
    let mut out = Array2::zeros((rows, width));
    let mut scores = vec![T::zero(); positions];
    for r in 0..rows {
        let qr = q.row(r);
        let qr = qr.as_slice().expect("standard layout");
        for h in 0..heads {
            let block = h * dk..(h + 1) * dk;
            let qh = &qr[block.clone()];
            let mut max = T::neg_infinity();
            for (j, sc) in scores.iter_mut().enumerate() {
                let kr = cache.keys[j].row(r);
                let kh = &kr.as_slice().expect("standard layout")[block.clone()];
                let dot = qh.iter().zip(kh).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
                *sc = dot;
                max = max.max(dot);
            }
            let mut total = T::zero();
            for sc in scores.iter_mut() {
                *sc = (*sc - max).exp();
                total += *sc;
            }
            let mut orow = out.slice_mut(s![r, block.clone()]);
            for (j, &w) in scores.iter().enumerate() {
                let vr = cache.values[j].row(r);
                let vh = &vr.as_slice().expect("standard layout")[block.clone()];
                let w = w / total;
                for (o, &val) in orow.iter_mut().zip(vh) {
                    *o += w * val;
                }
            }
        }
    }
    out
}

/// `Y = norm2(Z + FF(Z))` with `Z = norm1(X + Attention(X))`; the feed-forward
/// block is a relu layer of width `d_ff` followed by a linear layer.
pub fn transformer_cell<T: Scalar>(
    x: ArrayView2<T>,
    p: &[Array2<T>],
    ix: &CellIndex,
    heads: usize,
    cache: Option<&mut KvCache<T>>,
) -> Array2<T> {
    let mut z = masked_multihead_attention(x, p, ix, heads, cache);
    z += &x;
    let (z, _, _) = kernels::layer_norm_rows(z.view(), p[ix.norm1_gain].view(), p[ix.norm1_bias].view());
    let hidden = affine(z.view(), p[ix.ff1_w].view(), p[ix.ff1_b].view()).mapv_into(kernels::relu);
    let mut y = affine(hidden.view(), p[ix.ff2_w].view(), p[ix.ff2_b].view());
    y += &z;
    kernels::layer_norm_rows(y.view(), p[ix.norm2_gain].view(), p[ix.norm2_bias].view()).0
}

/// Embedding of raw inputs plus positional rows (one row broadcasts over
/// the batch).
pub fn embed<T: Scalar>(
    inputs: ArrayView2<T>,
    positions: ArrayView2<T>,
    p: &[Array2<T>],
    tf: &TransformerIndex,
) -> Array2<T> {
    let mut e = affine(inputs, p[tf.embed_w].view(), p[tf.embed_b].view());
    e += &positions;
    e
}

/// Recorded counterparts of the eager layers.
pub mod recorded {
    use super::*;

    type R = Result<Var, TensorError>;

    pub fn gru_step<T: Scalar>(g: &mut Graph<T>, x: Var, h: Var, v: &[Var], ix: &GruIndex) -> R {
        let xr = g.affine(x, v[ix.w_ir], v[ix.b_ir])?;
        let hr = g.affine(h, v[ix.w_hr], v[ix.b_hr])?;
        let r_pre = g.add(xr, hr)?;
        let r = g.sigmoid(r_pre)?;
        let xz = g.affine(x, v[ix.w_iz], v[ix.b_iz])?;
        let hz = g.affine(h, v[ix.w_hz], v[ix.b_hz])?;
        let z_pre = g.add(xz, hz)?;
        let z = g.sigmoid(z_pre)?;
        let xn = g.affine(x, v[ix.w_in], v[ix.b_in])?;
        let hn = g.affine(h, v[ix.w_hn], v[ix.b_hn])?;
        let gated = g.mul(r, hn)?;
        let n_pre = g.add(xn, gated)?;
        let n = g.tanh(n_pre)?;
        // (1 - z) * n + z * h  ==  n + z * (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    pub fn head_log_probs<T: Scalar>(g: &mut Graph<T>, h: Var, v: &[Var], ix: &HeadIndex) -> R {
        let a = g.affine(h, v[ix.w1], v[ix.b1])?;
        let a = g.relu(a)?;
        let logits = g.affine(a, v[ix.w2], v[ix.b2])?;
        g.log_softmax(logits)
    }

    /// `x` stacks sequences of `seq_len` rows.
    pub fn transformer_cell<T: Scalar>(
        g: &mut Graph<T>,
        x: Var,
        v: &[Var],
        ix: &CellIndex,
        heads: usize,
        seq_len: usize,
    ) -> R {
        let q = g.affine(x, v[ix.wq], v[ix.bq])?;
        let k = g.affine(x, v[ix.wk], v[ix.bk])?;
        let val = g.affine(x, v[ix.wv], v[ix.bv])?;
        let att = g.masked_attention(q, k, val, heads, seq_len)?;
        let att = g.affine(att, v[ix.wo], v[ix.bo])?;
        let res = g.add(x, att)?;
        let z = g.layer_norm(res, v[ix.norm1_gain], v[ix.norm1_bias])?;
        let f = g.affine(z, v[ix.ff1_w], v[ix.ff1_b])?;
        let f = g.relu(f)?;
        let f = g.affine(f, v[ix.ff2_w], v[ix.ff2_b])?;
        let res = g.add(z, f)?;
        g.layer_norm(res, v[ix.norm2_gain], v[ix.norm2_bias])
    }
}
