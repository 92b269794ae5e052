//! Eager dense kernels. The recorded graph and the cached inference paths
//! both evaluate their forward values through these functions.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::scalar::Scalar;

/// Variance floor inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// `x @ w + b` with `b` a `1 x out` row broadcast over the rows of `x`.
pub fn affine<T: Scalar>(x: ArrayView2<T>, w: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let mut out = x.dot(&w);
    out += &b;
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(a: ArrayView2<T>) -> Array2<T> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise `log(softmax(a))` evaluated as `a - max - log(sum exp(a - max))`.
pub fn log_softmax_rows<T: Scalar>(a: ArrayView2<T>) -> Array2<T> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise layer normalization. Returns the output together with the
/// normalized pre-affine rows and the inverse standard deviations.
pub fn layer_norm_rows<T: Scalar>(
    x: ArrayView2<T>,
    gain: ArrayView2<T>,
    bias: ArrayView2<T>,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let d = T::lit(x.ncols() as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.fold(T::zero(), |acc, &v| acc + v * v) / d;
        *inv = T::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, xhat, inv_std)
}

/// Causal multi-head attention over `batch` sequences stacked row-wise,
/// each `seq_len` rows long. `q`, `k`, `v` hold all heads side by side.
///
/// Returns the concatenated head outputs and the attention weights, one
/// `seq_len x seq_len` matrix per (sequence, head) in sequence-major order.
pub fn causal_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
    seq_len: usize,
) -> (Array2<T>, Vec<Array2<T>>) {
    let (rows, width) = q.dim();
    debug_assert_eq!(rows % seq_len, 0);
    debug_assert_eq!(width % heads, 0);
    let dk = width / heads;
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let mask = Array2::from_shape_fn((seq_len, seq_len), |(i, j)| {
        if j > i {
            T::mask_value()
        } else {
            T::zero()
        }
    });
    let mut out = Array2::zeros((rows, width));
    let mut probs = Vec::with_capacity(rows / seq_len * heads);
    for b in 0..rows / seq_len {
        let r = b * seq_len..(b + 1) * seq_len;
        for h in 0..heads {
            let c = h * dk..(h + 1) * dk;
            let qh = q.slice(s![r.clone(), c.clone()]);
            let kh = k.slice(s![r.clone(), c.clone()]);
            let vh = v.slice(s![r.clone(), c.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * scale);
            scores += &mask;
            let p = softmax_rows(scores.view());
            out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vh));
            probs.push(p);
        }
    }
    (out, probs)
}

/// Sinusoidal position table of shape `len x width`.
pub fn positional_encoding<T: Scalar>(len: usize, width: usize) -> Array2<T> {
    let mut pe = Array2::zeros((len, width));
    for l in 0..len {
        for i in 0..width.div_ceil(2) {
            let angle = l as f64 / 10000f64.powf(2.0 * i as f64 / width as f64);
            pe[[l, 2 * i]] = T::lit(angle.sin());
            if 2 * i + 1 < width {
                pe[[l, 2 * i + 1]] = T::lit(angle.cos());
            }
        }
    }
    pe
}

/// Rows `idx` of `a`, in order.
pub fn select_rows<T: Scalar>(a: &Array2<T>, idx: &[usize]) -> Array2<T> {
    a.select(Axis(0), idx)
}

/// Each row of `a` repeated `times` times consecutively.
pub fn repeat_rows<T: Scalar>(a: &Array2<T>, times: usize) -> Array2<T> {
    let idx: Vec<usize> = (0..a.nrows())
        .flat_map(|r| std::iter::repeat_n(r, times))
        .collect();
    a.select(Axis(0), &idx)
}

/// In-place GRU update `h' = (1 - z) * n + z * h` from precomputed gate
/// pre-activations.
pub(crate) fn gru_combine<T: Scalar>(
    h: &mut Array2<T>,
    r_pre: &Array2<T>,
    z_pre: &Array2<T>,
    n_in: &Array2<T>,
    n_hid: &Array2<T>,
) {
    Zip::from(h)
        .and(r_pre)
        .and(z_pre)
        .and(n_in)
        .and(n_hid)
        .for_each(|h, &rp, &zp, &ni, &nh| {
            let r = sigmoid(rp);
            let z = sigmoid(zp);
            let n = (ni + r * nh).tanh();
            *h = (T::one() - z) * n + z * *h;
        });
}
