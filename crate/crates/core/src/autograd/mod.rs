//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough context to push gradients back to its inputs. Parameters live in a
//! [`ParamStore`](crate::params::ParamStore) outside the tape and are pulled in
//! per step, so one tape corresponds to one forward/backward pass.

mod attention;

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub use attention::AttentionSpec;

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    GatherParam {
        param: ParamId,
        rows: usize,
        idx: Vec<usize>,
        skip_pad: bool,
    },
    SelectRows(Var, Vec<usize>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    TileRows(Var, usize),
    ConcatCols(Vec<Var>),
    Relu(Var),
    Tanh(Var),
    Silu(Var),
    Softplus(Var),
    Ln(Var),
    Exp(Var),
    Square(Var),
    SumCols(Var),
    SumAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        len: usize,
    },
    BceLogits {
        logits: Var,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: BTreeMap<ParamId, Mat>,
}

impl Gradients {
    /// Gradient of the loss with respect to an intermediate or input node.
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Mat> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Mat> {
        self.params
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Mat, b: &Mat, what: &str) {
    assert_eq!(a.dim(), b.dim(), "{what}: shape {:?} vs {:?}", a.dim(), b.dim());
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Floor applied to probabilities before taking logs in the BCE loss.
pub const BCE_FLOOR: f64 = 1e-7;

/// Per-example binary cross-entropy on a logit, with both log arguments floored
/// at [`BCE_FLOOR`].
pub fn bce_term(logit: f64, label: f64) -> f64 {
    let p = sigmoid(logit);
    let q = sigmoid(-logit);
    -(label * p.max(BCE_FLOOR).ln() + (1.0 - label) * q.max(BCE_FLOOR).ln())
}

fn bce_grad(logit: f64, label: f64) -> f64 {
    let p = sigmoid(logit);
    let q = sigmoid(-logit);
    let mut g = 0.0;
    // d/ds -ln p = -(1-p) = -q ; d/ds -ln q = p
    if p >= BCE_FLOOR {
        g -= label * q;
    }
    if q >= BCE_FLOOR {
        g += (1.0 - label) * p;
    }
    g
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, false)
    }

    /// An input whose gradient is tracked (useful for probing derivatives).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Row lookup into a parameter table. With `skip_pad`, row 0 is treated as
    /// a frozen padding row and never receives gradient.
    pub fn gather_param(&mut self, store: &ParamStore, id: ParamId, idx: &[usize], skip_pad: bool) -> Result<Var> {
        let table = store.value(id);
        let (rows, cols) = table.dim();
        let mut out = Mat::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, size: rows });
            }
            out.row_mut(r).assign(&table.row(i));
        }
        Ok(self.push(
            out,
            Op::GatherParam {
                param: id,
                rows,
                idx: idx.to_vec(),
                skip_pad,
            },
            true,
        ))
    }

    /// Rows `idx` of `a`, in that order (repeats allowed).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(v, Op::SelectRows(a, idx.to_vec()), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "div");
        let v = self.value(a) / self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    /// `a (n×m) + b (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, m) = self.value(a).dim();
        assert_eq!(self.value(b).dim(), (1, m), "add_row: bias shape");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddRow(a, b), rg)
    }

    /// `a (n×m) * c (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (n, _) = self.value(a).dim();
        assert_eq!(self.value(c).dim(), (n, 1), "mul_col: column shape");
        let v = self.value(a) * self.value(c);
        let rg = self.rg(a) || self.rg(c);
        self.push(v, Op::MulCol(a, c), rg)
    }

    /// Repeat a `1×m` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let (r, m) = self.value(a).dim();
        assert_eq!(r, 1, "broadcast_rows expects a single row");
        let v = self.value(a).broadcast((n, m)).expect("broadcast").to_owned();
        let rg = self.rg(a);
        self.push(v, Op::BroadcastRows(a), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// Stack `reps` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, reps: usize) -> Var {
        let src = self.value(a);
        let (l, m) = src.dim();
        let mut v = Mat::zeros((l * reps, m));
        for r in 0..reps {
            v.slice_mut(s![r * l..(r + 1) * l, ..]).assign(src);
        }
        let rg = self.rg(a);
        self.push(v, Op::TileRows(a, reps), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = self.value(parts[0]).nrows();
        let width: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Mat::zeros((n, width));
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.nrows(), n, "concat_cols: row mismatch");
            v.slice_mut(s![.., off..off + m.ncols()]).assign(m);
            off += m.ncols();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    /// Row sums: `n×m -> n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(v, Op::SumCols(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Mat::from_elem((1, 1), total), Op::SumAll(a), rg)
    }

    /// Row-wise layer normalization with learnable `gamma`/`beta` (`1×m`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut xhat = Mat::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Scaled dot-product multi-head attention over already projected
    /// queries, keys and values. See [`AttentionSpec`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (out, probs) = attention::forward(self.value(q), self.value(k), self.value(v), &spec);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, spec, probs }, rg)
    }

    /// Attention probabilities of an attention node, laid out as
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, node: Var) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over the unmasked rows of each length-`len` block; a block with no
    /// unmasked rows pools to zero.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool], len: usize) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        assert_eq!(mask.len(), n, "masked_mean: mask length");
        assert_eq!(n % len, 0, "masked_mean: rows not a multiple of len");
        let batch = n / len;
        let mut out = Mat::zeros((batch, m));
        for b in 0..batch {
            let rows = &mask[b * len..(b + 1) * len];
            let count = rows.iter().filter(|&&r| r).count();
            if count == 0 {
                continue;
            }
            let mut acc = out.row_mut(b);
            for (i, &keep) in rows.iter().enumerate() {
                if keep {
                    acc += &xv.row(b * len + i);
                }
            }
            acc /= count as f64;
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                len,
            },
            rg,
        )
    }

    /// Per-row binary cross-entropy of `n×1` logits against fixed labels.
    pub fn bce_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), (labels.len(), 1), "bce_logits: shape");
        let v = Mat::from_shape_fn((labels.len(), 1), |(r, _)| bce_term(lv[[r, 0]], labels[r]));
        let rg = self.rg(logits);
        self.push(
            v,
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Back-propagate from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from non-scalar");
        self.backward_with(loss, Mat::from_elem((1, 1), 1.0))
    }

    /// Back-propagate an arbitrary upstream gradient from `root`.
    pub fn backward_with(&self, root: Var, seed: Mat) -> Gradients {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut params: BTreeMap<ParamId, Mat> = BTreeMap::new();
        grads[root.0] = Some(seed);

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match params.get_mut(id) {
                    Some(p) => *p += &g,
                    None => {
                        params.insert(*id, g);
                    }
                },
                Op::GatherParam {
                    param,
                    rows,
                    idx,
                    skip_pad,
                } => {
                    let cols = g.ncols();
                    let entry = params.entry(*param).or_insert_with(|| Mat::zeros((*rows, cols)));
                    for (r, &t) in idx.iter().enumerate() {
                        if *skip_pad && t == 0 {
                            continue;
                        }
                        let mut dst = entry.row_mut(t);
                        dst += &g.row(r);
                    }
                }
                Op::SelectRows(a, idx) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g / bv);
                    }
                    if self.rg(*b) {
                        let out = &node.value;
                        acc(&mut grads, *b, -(&g * out) / bv);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulCol(a, c) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * self.value(*c));
                    }
                    if self.rg(*c) {
                        let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, *c, gc);
                    }
                }
                Op::BroadcastRows(a) => {
                    acc(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::TileRows(a, reps) => {
                    let (l, m) = self.value(*a).dim();
                    let mut ga = Mat::zeros((l, m));
                    for r in 0..*reps {
                        ga += &g.slice(s![r * l..(r + 1) * l, ..]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.rg(*p) {
                            acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |d, &x| {
                        let s = sigmoid(x);
                        *d *= s * (1.0 + x * (1.0 - s));
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |d, &x| *d *= sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => acc(&mut grads, *a, g / self.value(*a)),
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Square(a) => acc(&mut grads, *a, g * self.value(*a) * 2.0),
                Op::SumCols(a) => {
                    let m = self.value(*a).ncols();
                    let ga = g.broadcast((g.nrows(), m)).expect("broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*gamma) {
                        acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*beta) {
                        acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let (n, m) = dxhat.dim();
                        let mf = m as f64;
                        let mut dx = Mat::zeros((n, m));
                        for r in 0..n {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let sum_d: f64 = dr.sum();
                            let sum_dx: f64 = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum();
                            for c in 0..m {
                                dx[[r, c]] = inv_std[r] / mf * (mf * dr[c] - sum_d - xr[c] * sum_dx);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (dq, dk, dv) =
                        attention::backward(&g, self.value(*q), self.value(*k), self.value(*v), probs, spec);
                    if self.rg(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if self.rg(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if self.rg(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::MaskedMean { x, mask, len } => {
                    let (n, m) = self.value(*x).dim();
                    let mut gx = Mat::zeros((n, m));
                    for b in 0..n / len {
                        let rows = &mask[b * len..(b + 1) * len];
                        let count = rows.iter().filter(|&&r| r).count();
                        if count == 0 {
                            continue;
                        }
                        let share = &g.row(b) / count as f64;
                        for (i, &keep) in rows.iter().enumerate() {
                            if keep {
                                gx.row_mut(b * len + i).assign(&share);
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::BceLogits { logits, labels } => {
                    let lv = self.value(*logits);
                    let gl =
                        Mat::from_shape_fn((labels.len(), 1), |(r, _)| g[[r, 0]] * bce_grad(lv[[r, 0]], labels[r]));
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        Gradients { nodes: grads, params }
    }
}
