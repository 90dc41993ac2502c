//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation is evaluated eagerly when it is recorded on a [`Tape`];
//! [`Tape::backward`] then walks the recorded nodes in reverse and
//! accumulates gradients for the parameters held in a [`ParamStore`].
//! Scalars are represented as `1 x 1` matrices.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, grouped parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.groups.push(group.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect()
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    LeftMul(Arc<Mat>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var, usize),
    Mul(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    SumSquares(Var, f64),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        scale: f64,
        attn: Vec<Mat>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `k * x` for a fixed matrix `k` (pooling, differencing, broadcasting).
    pub fn left_mul(&mut self, k: Arc<Mat>, x: Var) -> Var {
        let v = k.dot(self.value(x));
        self.push(v, Op::LeftMul(k, x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Multiplies `a` by the scalar entry `s[0, col]` of a row vector node.
    pub fn scale_by(&mut self, a: Var, s: Var, col: usize) -> Var {
        let c = self.value(s)[[0, col]];
        let v = self.value(a) * c;
        self.push(v, Op::ScaleBy(a, s, col))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise softmax. Entries where `allowed` is false get probability zero.
    pub fn softmax_rows(&mut self, a: Var, allowed: Option<&Array2<bool>>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.raw_dim());
        for (r, (row, mut orow)) in x.rows().into_iter().zip(out.rows_mut()).enumerate() {
            let ok = |c: usize| allowed.is_none_or(|m| m[[r, c]]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(c, _)| ok(*c))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, (&xv, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if ok(c) {
                    *o = (xv - max).exp();
                    sum += *o;
                }
            }
            if sum > 0.0 {
                orow.mapv_inplace(|v| v / sum);
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// the `1 x n` affine parameters `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = Mat::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (row, mut hrow) in xv.rows().into_iter().zip(xhat.rows_mut()) {
            let mu = row.sum() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            hrow.iter_mut().zip(row.iter()).for_each(|(h, v)| *h = (v - mu) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let v = self.value(a).select(Axis(1), cols);
        self.push(v, Op::GatherCols(a, cols.to_vec()))
    }

    /// Scaled dot-product attention restricted to consecutive row blocks of
    /// length `block`: row `i` attends only to rows in the same block. The
    /// last block may be shorter.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, block: usize, scale: f64) -> Var {
        assert!(block > 0, "block_attention: zero block");
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let t = qv.nrows();
        let mut out = Mat::zeros((t, vv.ncols()));
        let mut attn = Vec::with_capacity(t.div_ceil(block));
        for start in (0..t).step_by(block) {
            let end = (start + block).min(t);
            let mut a = qv.slice(s![start..end, ..]).dot(&kv.slice(s![start..end, ..]).t()) * scale;
            for mut row in a.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, x| m.max(*x));
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row /= sum;
            }
            out.slice_mut(s![start..end, ..])
                .assign(&a.dot(&vv.slice(s![start..end, ..])));
            attn.push(a);
        }
        self.push(
            out,
            Op::BlockAttention {
                q,
                k,
                v,
                block,
                scale,
                attn,
            },
        )
    }

    /// `scale * sum(a^2)` as a `1 x 1` node.
    pub fn sum_squares(&mut self, a: Var, scale: f64) -> Var {
        let v = scale * self.value(a).iter().map(|x| x * x).sum::<f64>();
        self.push(Mat::from_elem((1, 1), v), Op::SumSquares(a, scale))
    }

    /// Gradients of the scalar node `out` with respect to every parameter in
    /// `store`. Parameters that do not influence `out` get zero gradients.
    pub fn backward(&self, out: Var, store: &ParamStore) -> Vec<Mat> {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads = store.zeros_like();
        grads[out.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => param_grads[id.0] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::LeftMul(k, x) => accumulate(&mut grads, *x, k.t().dot(&g)),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::ScaleBy(a, sv, col) => {
                    let c = self.value(*sv)[[0, *col]];
                    let dc = (&g * self.value(*a)).sum();
                    let mut gs = Mat::zeros(self.value(*sv).raw_dim());
                    gs[[0, *col]] = dc;
                    accumulate(&mut grads, *sv, gs);
                    accumulate(&mut grads, *a, g * c);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Gelu(a) => {
                    let mut ga = self.value(*a).mapv(|x| {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
                    });
                    ga *= &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.raw_dim());
                    for ((yr, gr), mut out) in y.rows().into_iter().zip(g.rows()).zip(ga.rows_mut()) {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in out.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_v = self.value(*gamma);
                    accumulate(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * gamma_v;
                    let n = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.raw_dim());
                    for (r, mut out) in gx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_h: f64 = dh.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
                        for ((o, d), hv) in out.iter_mut().zip(dh.iter()).zip(h.iter()) {
                            *o = inv_std[r] / n * (n * d - sum_dh - hv * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::GatherCols(a, cols) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for (k, &c) in cols.iter().enumerate() {
                        let mut col = ga.column_mut(c);
                        col += &g.column(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumSquares(a, scale) => {
                    let ga = self.value(*a) * (2.0 * scale * g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::BlockAttention {
                    q,
                    k,
                    v,
                    block,
                    scale,
                    attn,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut gq = Mat::zeros(qv.raw_dim());
                    let mut gk = Mat::zeros(kv.raw_dim());
                    let mut gv = Mat::zeros(vv.raw_dim());
                    for (b, a) in attn.iter().enumerate() {
                        let start = b * block;
                        let rows = s![start..start + a.nrows(), ..];
                        let go = g.slice(rows);
                        gv.slice_mut(rows).assign(&a.t().dot(&go));
                        let ga = go.dot(&vv.slice(rows).t());
                        let mut gs = Mat::zeros(a.raw_dim());
                        for ((ar, gr), mut o) in a.rows().into_iter().zip(ga.rows()).zip(gs.rows_mut()) {
                            let dot: f64 = ar.iter().zip(gr.iter()).map(|(x, y)| x * y).sum();
                            for ((o, av), gav) in o.iter_mut().zip(ar.iter()).zip(gr.iter()) {
                                *o = scale * av * (gav - dot);
                            }
                        }
                        gq.slice_mut(rows).assign(&gs.dot(&kv.slice(rows)));
                        gk.slice_mut(rows).assign(&gs.t().dot(&qv.slice(rows)));
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
            }
        }
        param_grads
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
