//! Define-by-run computation record with reverse-mode gradients.
//!
//! Every tensor is a dense row-major matrix; vectors are `1 x n` rows and
//! scalars are `1 x 1`. A [`Graph`] is rebuilt for each forward pass and can be
//! backpropagated exactly once.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::kernels;
use super::TensorError;
use crate::scalar::Scalar;

static NEXT_GRAPH: AtomicUsize = AtomicUsize::new(0);

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: usize,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Array2<T>,
        inv_std: Array1<T>,
    },
    Concat(Vec<usize>),
    Sum(usize),
    SumCols(usize),
    Reshape(usize),
    Pick(usize, Vec<usize>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        seq_len: usize,
        probs: Vec<Array2<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    id: usize,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array2<T>>>,
    backpropagated: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape<T>(a: &Array2<T>) -> (usize, usize) {
    a.dim()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVariable);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn val(&self, i: usize) -> &Array2<T> {
        &self.nodes[i].value
    }

    pub fn leaf(&mut self, value: Array2<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Array2<T>, TensorError> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Gradient of the backpropagated loss with respect to `v`. `None` before
    /// [`Graph::backward`] or when `v` does not depend on any trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Array2<T>> {
        let i = self.idx(v).ok()?;
        self.grads.get(i).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn grad_or_zero(&self, v: Var) -> Result<Array2<T>, TensorError> {
        let i = self.idx(v)?;
        if !self.backpropagated {
            return Err(TensorError::NotBackpropagated);
        }
        Ok(self.grads[i]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.nodes[i].value.dim())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (shape(self.val(ia)), shape(self.val(ib)));
        if sa.1 != sb.0 {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let out = self.val(ia).dot(self.val(ib));
        Ok(self.push(out, Op::MatMul(ia, ib), &[ia, ib]))
    }

    /// `x @ w + b` with a `1 x out` bias row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (sx, sw, sb) = (shape(self.val(ix)), shape(self.val(iw)), shape(self.val(ib)));
        if sx.1 != sw.0 {
            return Err(TensorError::shape("affine", sx, sw));
        }
        if sb != (1, sw.1) {
            return Err(TensorError::shape("affine bias", sw, sb));
        }
        let out = kernels::affine(self.val(ix).view(), self.val(iw).view(), self.val(ib).view());
        Ok(self.push(out, Op::Affine(ix, iw, ib), &[ix, iw, ib]))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), TensorError> {
        let (sa, sb) = (shape(self.val(a)), shape(self.val(b)));
        if sa != sb {
            return Err(TensorError::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ia, ib)?;
        let out = self.val(ia) + self.val(ib);
        Ok(self.push(out, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", ia, ib)?;
        let out = self.val(ia) - self.val(ib);
        Ok(self.push(out, Op::Sub(ia, ib), &[ia, ib]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ia, ib)?;
        let out = self.val(ia) * self.val(ib);
        Ok(self.push(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = self.val(ia).mapv(|x| x * c);
        Ok(self.push(out, Op::Scale(ia, c), &[ia]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = self.val(ia).mapv(f);
        Ok(self.push(out, op(ia), &[ia]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, kernels::sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, T::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, kernels::relu, Op::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, T::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, T::ln, Op::Log)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        if self.val(ia).ncols() == 0 {
            return Err(TensorError::EmptySoftmax);
        }
        let out = kernels::softmax_rows(self.val(ia).view());
        Ok(self.push(out, Op::Softmax(ia), &[ia]))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        if self.val(ia).ncols() == 0 {
            return Err(TensorError::EmptySoftmax);
        }
        let out = kernels::log_softmax_rows(self.val(ia).view());
        Ok(self.push(out, Op::LogSoftmax(ia), &[ia]))
    }

    /// Row-wise layer normalization with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let d = self.val(ix).ncols();
        for i in [ig, ib] {
            if shape(self.val(i)) != (1, d) {
                return Err(TensorError::shape("layer_norm", shape(self.val(ix)), shape(self.val(i))));
            }
        }
        let (y, xhat, inv_std) =
            kernels::layer_norm_rows(self.val(ix).view(), self.val(ig).view(), self.val(ib).view());
        let op = Op::LayerNorm {
            x: ix,
            gain: ig,
            bias: ib,
            xhat,
            inv_std,
        };
        Ok(self.push(y, op, &[ix, ig, ib]))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(TensorError::InvalidArgument("concat of nothing".into()));
        };
        let rows = self.val(first).nrows();
        for &i in &idx {
            if self.val(i).nrows() != rows {
                return Err(TensorError::shape("concat", shape(self.val(first)), shape(self.val(i))));
            }
        }
        let views: Vec<_> = idx.iter().map(|&i| self.val(i).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(out, Op::Concat(idx.clone()), &idx))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = Array2::from_elem((1, 1), self.val(ia).sum());
        Ok(self.push(out, Op::Sum(ia), &[ia]))
    }

    /// Sum across columns, giving `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = self.val(ia).sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(out, Op::SumCols(ia), &[ia]))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let sa = shape(self.val(ia));
        if sa.0 * sa.1 != rows * cols {
            return Err(TensorError::shape("reshape", sa, (rows, cols)));
        }
        let flat: Vec<T> = self.val(ia).iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("size checked");
        Ok(self.push(out, Op::Reshape(ia), &[ia]))
    }

    /// Entry `a[r, cols[r]]` of every row, as `rows x 1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let sa = shape(self.val(ia));
        if cols.len() != sa.0 || cols.iter().any(|&c| c >= sa.1) {
            return Err(TensorError::shape("pick", sa, (cols.len(), 1)));
        }
        let v = self.val(ia);
        let out = Array2::from_shape_fn((sa.0, 1), |(r, _)| v[[r, cols[r]]]);
        Ok(self.push(out, Op::Pick(ia, cols.to_vec()), &[ia]))
    }

    /// Causal multi-head scaled dot-product attention over sequences of
    /// `seq_len` rows stacked vertically. Heads occupy consecutive column
    /// blocks of width `cols / heads`.
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Var, TensorError> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        self.same_shape("attention", iq, ik)?;
        self.same_shape("attention", iq, iv)?;
        let (rows, cols) = shape(self.val(iq));
        if heads == 0 || cols % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "attention over {rows}x{cols} with {heads} heads and length {seq_len}"
            )));
        }
        let (out, probs) = kernels::causal_attention(
            self.val(iq).view(),
            self.val(ik).view(),
            self.val(iv).view(),
            heads,
            seq_len,
        );
        let op = Op::Attention {
            q: iq,
            k: ik,
            v: iv,
            heads,
            seq_len,
            probs,
        };
        Ok(self.push(out, op, &[iq, ik, iv]))
    }

    /// Reverse sweep from a `1 x 1` loss. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let il = self.idx(loss)?;
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let sl = shape(self.val(il));
        if sl != (1, 1) {
            return Err(TensorError::NonScalarLoss(sl));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        if self.nodes[il].requires_grad {
            grads[il] = Some(Array2::ones((1, 1)));
        }
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let mut acc = |j: usize, d: Array2<T>| match &mut grads[j] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        };
        let y = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.dot(&nodes[*b].value.t()));
                }
                if wants(*b) {
                    acc(*b, nodes[*a].value.t().dot(g));
                }
            }
            Op::Affine(x, w, b) => {
                if wants(*x) {
                    acc(*x, g.dot(&nodes[*w].value.t()));
                }
                if wants(*w) {
                    acc(*w, nodes[*x].value.t().dot(g));
                }
                if wants(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g * &nodes[*b].value);
                }
                if wants(*b) {
                    acc(*b, g * &nodes[*a].value);
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    acc(*a, g.mapv(|x| x * *c));
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(y).for_each(|d, &s| *d = *d * s * (T::one() - s));
                    acc(*a, d);
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(y).for_each(|d, &t| *d *= T::one() - t * t);
                    acc(*a, d);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&nodes[*a].value).for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    acc(*a, d);
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    acc(*a, g * y);
                }
            }
            Op::Log(a) => {
                if wants(*a) {
                    acc(*a, g / &nodes[*a].value);
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let mut d = g * y;
                    for (mut row, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yr).for_each(|r, &p| *r -= p * dot);
                    }
                    acc(*a, d);
                }
            }
            Op::LogSoftmax(a) => {
                if wants(*a) {
                    let mut d = g.clone();
                    for (mut row, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                        let total = row.sum();
                        Zip::from(&mut row)
                            .and(&yr)
                            .for_each(|r, &ly| *r -= ly.exp() * total);
                    }
                    acc(*a, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if wants(*gain) {
                    acc(*gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if wants(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if wants(*x) {
                    let d = T::lit(xhat.ncols() as f64);
                    let mut dx = g * &nodes[*gain].value;
                    for ((mut row, xr), &s) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                        let mean_d = row.sum() / d;
                        let mean_dx = row.iter().zip(xr).fold(T::zero(), |a, (&u, &v)| a + u * v) / d;
                        Zip::from(&mut row)
                            .and(&xr)
                            .for_each(|r, &xh| *r = s * (*r - mean_d - xh * mean_dx));
                    }
                    acc(*x, dx);
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = nodes[p].value.ncols();
                    if wants(p) {
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    acc(*a, Array2::from_elem(nodes[*a].value.dim(), g[[0, 0]]));
                }
            }
            Op::SumCols(a) => {
                if wants(*a) {
                    let (r, c) = nodes[*a].value.dim();
                    acc(*a, Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]));
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    let flat: Vec<T> = g.iter().copied().collect();
                    acc(*a, Array2::from_shape_vec(nodes[*a].value.dim(), flat).expect("same size"));
                }
            }
            Op::Pick(a, cols) => {
                if wants(*a) {
                    let mut d = Array2::zeros(nodes[*a].value.dim());
                    for (r, &c) in cols.iter().enumerate() {
                        d[[r, c]] = g[[r, 0]];
                    }
                    acc(*a, d);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                let (rows, cols) = qv.dim();
                let dk = cols / heads;
                let scale = T::one() / T::lit(dk as f64).sqrt();
                let mut dq = Array2::zeros((rows, cols));
                let mut dkm = Array2::zeros((rows, cols));
                let mut dv = Array2::zeros((rows, cols));
                for b in 0..rows / seq_len {
                    let r = b * seq_len..(b + 1) * seq_len;
                    for h in 0..*heads {
                        let c = h * dk..(h + 1) * dk;
                        let p = &probs[b * heads + h];
                        let go = g.slice(s![r.clone(), c.clone()]);
                        dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(s![r.clone(), c.clone()]).t());
                        let mut ds = &dp * p;
                        for (mut row, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = row.sum();
                            Zip::from(&mut row).and(&pr).for_each(|x, &pp| *x -= pp * dot);
                        }
                        ds.mapv_inplace(|x| x * scale);
                        dq.slice_mut(s![r.clone(), c.clone()])
                            .assign(&ds.dot(&kv.slice(s![r.clone(), c.clone()])));
                        dkm.slice_mut(s![r.clone(), c.clone()])
                            .assign(&ds.t().dot(&qv.slice(s![r.clone(), c.clone()])));
                    }
                }
                if wants(*q) {
                    acc(*q, dq);
                }
                if wants(*k) {
                    acc(*k, dkm);
                }
                if wants(*v) {
                    acc(*v, dv);
                }
            }
        }
    }
}
