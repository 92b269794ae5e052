//! Named parameter blocks and the index layout of each architecture.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ModelKind};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
enum Fill {
    Weight,
    Zero,
    One,
}

/// GRU weights; `w_i*` are `d_in x d_h`, `w_h*` are `d_h x d_h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruIndex {
    pub w_ir: usize,
    pub w_iz: usize,
    pub w_in: usize,
    pub w_hr: usize,
    pub w_hz: usize,
    pub w_hn: usize,
    pub b_ir: usize,
    pub b_iz: usize,
    pub b_in: usize,
    pub b_hr: usize,
    pub b_hz: usize,
    pub b_hn: usize,
}

/// Two dense layers, relu then softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadIndex {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// One transformer cell. Query, key and value matrices hold all heads as
/// consecutive column blocks of width `d_h / heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellIndex {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub norm1_gain: usize,
    pub norm1_bias: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
    pub norm2_gain: usize,
    pub norm2_bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerIndex {
    pub embed_w: usize,
    pub embed_b: usize,
    pub cells: Vec<CellIndex>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layout {
    Recurrent {
        gru: GruIndex,
        head: HeadIndex,
    },
    Transformer {
        tf: TransformerIndex,
        head: HeadIndex,
    },
    Large {
        tf: TransformerIndex,
        gru: GruIndex,
        head: HeadIndex,
    },
}

impl Layout {
    pub fn head(&self) -> &HeadIndex {
        match self {
            Layout::Recurrent { head, .. } | Layout::Transformer { head, .. } | Layout::Large { head, .. } => head,
        }
    }
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    fills: Vec<Fill>,
}

impl Builder {
    fn add(&mut self, name: String, shape: (usize, usize), fill: Fill) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.fills.push(fill);
        self.names.len() - 1
    }

    fn gru(&mut self, prefix: &str, d_in: usize, dh: usize) -> GruIndex {
        let mut w = |n: &str, rows: usize| self.add(format!("{prefix}.{n}"), (rows, dh), Fill::Weight);
        let (w_ir, w_iz, w_in) = (w("w_ir", d_in), w("w_iz", d_in), w("w_in", d_in));
        let (w_hr, w_hz, w_hn) = (w("w_hr", dh), w("w_hz", dh), w("w_hn", dh));
        let mut b = |n: &str| self.add(format!("{prefix}.{n}"), (1, dh), Fill::Zero);
        GruIndex {
            w_ir,
            w_iz,
            w_in,
            w_hr,
            w_hz,
            w_hn,
            b_ir: b("b_ir"),
            b_iz: b("b_iz"),
            b_in: b("b_in"),
            b_hr: b("b_hr"),
            b_hz: b("b_hz"),
            b_hn: b("b_hn"),
        }
    }

    fn head(&mut self, dh: usize, d_out: usize) -> HeadIndex {
        HeadIndex {
            w1: self.add("head.w1".into(), (dh, dh), Fill::Weight),
            b1: self.add("head.b1".into(), (1, dh), Fill::Zero),
            w2: self.add("head.w2".into(), (dh, d_out), Fill::Weight),
            b2: self.add("head.b2".into(), (1, d_out), Fill::Zero),
        }
    }

    fn transformer(&mut self, d_in: usize, dh: usize, dff: usize, cells: usize) -> TransformerIndex {
        let embed_w = self.add("embed.w".into(), (d_in, dh), Fill::Weight);
        let embed_b = self.add("embed.b".into(), (1, dh), Fill::Zero);
        let cells = (0..cells)
            .map(|c| {
                let mut p = |n: &str, shape, fill| self.add(format!("cell{c}.{n}"), shape, fill);
                CellIndex {
                    wq: p("wq", (dh, dh), Fill::Weight),
                    bq: p("bq", (1, dh), Fill::Zero),
                    wk: p("wk", (dh, dh), Fill::Weight),
                    bk: p("bk", (1, dh), Fill::Zero),
                    wv: p("wv", (dh, dh), Fill::Weight),
                    bv: p("bv", (1, dh), Fill::Zero),
                    wo: p("wo", (dh, dh), Fill::Weight),
                    bo: p("bo", (1, dh), Fill::Zero),
                    norm1_gain: p("norm1.gain", (1, dh), Fill::One),
                    norm1_bias: p("norm1.bias", (1, dh), Fill::Zero),
                    ff1_w: p("ff1.w", (dh, dff), Fill::Weight),
                    ff1_b: p("ff1.b", (1, dff), Fill::Zero),
                    ff2_w: p("ff2.w", (dff, dh), Fill::Weight),
                    ff2_b: p("ff2.b", (1, dh), Fill::Zero),
                    norm2_gain: p("norm2.gain", (1, dh), Fill::One),
                    norm2_bias: p("norm2.bias", (1, dh), Fill::Zero),
                }
            })
            .collect();
        TransformerIndex {
            embed_w,
            embed_b,
            cells,
        }
    }
}

/// Parameter names, shapes and initial fill of an architecture.
pub(crate) struct Blueprint {
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
    fills: Vec<Fill>,
    pub layout: Layout,
}

impl Blueprint {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
            fills: Vec::new(),
        };
        let dh = cfg.d_hidden;
        let p = cfg.scheme.patch_size();
        let layout = match cfg.kind {
            ModelKind::Rnn | ModelKind::PatchedRnn => {
                let gru = b.gru("gru", p, dh);
                let head = b.head(dh, 1 << p);
                Layout::Recurrent { gru, head }
            }
            ModelKind::PatchedTransformer => {
                let tf = b.transformer(p, dh, cfg.d_ff, cfg.cells);
                let head = b.head(dh, 1 << p);
                Layout::Transformer { tf, head }
            }
            ModelKind::LargePatchedTransformer => {
                let ps = cfg.scheme.sub_size();
                let tf = b.transformer(p, dh, cfg.d_ff, cfg.cells);
                let gru = b.gru("gru", ps, dh);
                let head = b.head(dh, 1 << ps);
                Layout::Large { tf, gru, head }
            }
        };
        Self {
            names: b.names,
            shapes: b.shapes,
            fills: b.fills,
            layout,
        }
    }

    /// Weights uniform in `[-1/sqrt(d_h), 1/sqrt(d_h)]`, biases zero, norm
    /// gains one, drawn in declaration order from a seeded ChaCha stream.
    pub fn initialize<T: Scalar>(&self, d_hidden: usize, seed: u64) -> Vec<Array2<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_hidden as f64).sqrt();
        self.shapes
            .iter()
            .zip(&self.fills)
            .map(|(&shape, fill)| match fill {
                Fill::Weight => Array2::from_shape_simple_fn(shape, || T::lit(rng.random_range(-bound..=bound))),
                Fill::Zero => Array2::zeros(shape),
                Fill::One => Array2::ones(shape),
            })
            .collect()
    }

    pub fn zeros<T: Scalar>(&self) -> Vec<Array2<T>> {
        self.shapes.iter().map(|&s| Array2::zeros(s)).collect()
    }
}
