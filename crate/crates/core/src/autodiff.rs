//! A small reverse-mode automatic differentiation tape over [`Matrix`] values.
//!
//! Parameters live in a [`ParamStore`]; a [`Tape`] borrows the store, records
//! every operation of one forward pass, and [`Tape::backward`] walks the
//! record in reverse to produce [`Gradients`] keyed by [`ParamId`].
//!
//! The op set is exactly what the backbone, the speaker encoder and the toy
//! flows need. Shapes are checked eagerly with panics: a shape error here is a
//! bug in the model code, not a recoverable condition.

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drops every parameter added after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.names.truncate(len);
        self.values.truncate(len);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.bit_eq(b))
    }
}

/// Accumulated gradients, one optional matrix per parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// `self += other`
    pub fn merge(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    RepeatRow(Var),
    Scale(Var, f64),
    Silu(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    SoftmaxRows(Var),
    Rope { x: Var, table: RopeTable },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Mse { x: Var, target: Matrix },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Matrix },
}

#[derive(Debug)]
struct Node {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Matrix>,
    op: Op,
}

/// Precomputed rotation angles for rotary position embedding.
#[derive(Debug, Clone)]
pub struct RopeTable {
    head_dim: usize,
    // per row: None = leave unrotated, Some((cos, sin)) over head_dim/2 pairs
    rows: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl RopeTable {
    /// Panics on an odd `head_dim`; callers validate first.
    pub fn new(positions: &[Option<usize>], head_dim: usize, base: f64) -> Self {
        assert!(head_dim.is_multiple_of(2), "rotary head width must be even");
        let half = head_dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|k| base.powf(-2.0 * k as f64 / head_dim as f64))
            .collect();
        let rows = positions
            .iter()
            .map(|p| {
                p.map(|pos| {
                    let angles: Vec<f64> = freqs.iter().map(|f| pos as f64 * f).collect();
                    (
                        angles.iter().map(|a| a.cos()).collect(),
                        angles.iter().map(|a| a.sin()).collect(),
                    )
                })
            })
            .collect();
        Self { head_dim, rows }
    }

    /// Rotates every `head_dim`-wide column block of `x` row by row.
    /// With `inverse`, applies the transpose rotation (the backward map).
    pub fn apply(&self, x: &Matrix, inverse: bool) -> Matrix {
        assert_eq!(x.rows(), self.rows.len(), "rope position count mismatch");
        assert_eq!(x.cols() % self.head_dim, 0, "rope width not a multiple of head width");
        let mut out = x.clone();
        let sign = if inverse { -1.0 } else { 1.0 };
        for (r, rot) in self.rows.iter().enumerate() {
            let Some((cos, sin)) = rot else { continue };
            let row = out.row_mut(r);
            for head in row.chunks_exact_mut(self.head_dim) {
                for (k, pair) in head.chunks_exact_mut(2).enumerate() {
                    let (a, b) = (pair[0], pair[1]);
                    let (c, s) = (cos[k], sign * sin[k]);
                    pair[0] = a * c - b * s;
                    pair[1] = a * s + b * c;
                }
            }
        }
        out
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Record of one forward computation.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the `1 × cols` row `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let v = self.value(x).add_row_broadcast(r.as_slice());
        self.push(v, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by the `1 × cols` row `row`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a single row");
        assert_eq!(r.cols(), self.value(x).cols(), "mul_row width mismatch");
        let mut v = self.value(x).clone();
        let rs = r.as_slice().to_vec();
        for i in 0..v.rows() {
            for (a, b) in v.row_mut(i).iter_mut().zip(&rs) {
                *a *= b;
            }
        }
        self.push(v, Op::MulRow(x, row))
    }

    /// Broadcasts a `1 × cols` row to `n × cols`.
    pub fn repeat_row(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "repeat_row expects a single row");
        let mut v = Matrix::zeros(n, r.cols());
        for i in 0..n {
            v.row_mut(i).copy_from_slice(r.as_slice());
        }
        self.push(v, Op::RepeatRow(row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z / (1.0 + (-z).exp()));
        self.push(v, Op::Silu(x))
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols() as f64;
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            rstd.push(s);
        }
        self.push(out, Op::LayerNorm { x, rstd })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn rope(&mut self, x: Var, table: RopeTable) -> Var {
        let v = table.apply(self.value(x), false);
        self.push(v, Op::Rope { x, table })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_rows(&mats);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_rows(start, len);
        self.push(v, Op::SliceRows(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.cols(), "column slice out of range");
        let v = Matrix::from_fn(m.rows(), len, |r, c| m.get(r, start + c));
        self.push(v, Op::SliceCols(x, start))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        assert!(m.rows() > 0, "mean over zero rows");
        let v = Matrix::row_vector(&m.mean_rows());
        self.push(v, Op::MeanRows(x))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x, norms })
    }

    /// Mean squared error against a constant target, as a `1 × 1` node.
    pub fn mse(&mut self, x: Var, target: &Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse shape mismatch");
        let n = xv.len().max(1) as f64;
        let loss = xv
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        self.push(
            Matrix::filled(1, 1, loss),
            Op::Mse {
                x,
                target: target.clone(),
            },
        )
    }

    /// Mean softmax cross-entropy of `logits` rows against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "label count mismatch");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = probs.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
            loss -= row[label].max(1e-300).ln();
        }
        loss /= labels.len().max(1) as f64;
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    /// Back-propagates from the scalar node `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, d: Matrix| accumulate(&mut grads, v, d);
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(&g, false, bv, true, &mut da, 0.0);
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av, true, &g, false, &mut db, 0.0);
                    send(*a, da);
                    send(*b, db);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(&g, false, bv, false, &mut da, 0.0);
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(&g, true, av, false, &mut db, 0.0);
                    send(*a, da);
                    send(*b, db);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.scale(-1.0));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::AddRow(x, row) => {
                    send(*row, Matrix::row_vector(&column_sums(&g)));
                    send(*x, g);
                }
                Op::MulRow(x, row) => {
                    let xv = self.value(*x);
                    let rv = self.value(*row).as_slice();
                    let mut dr = vec![0.0; rv.len()];
                    let mut dx = g.clone();
                    for r in 0..g.rows() {
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            dr[c] += *d * xv.get(r, c);
                            *d *= rv[c];
                        }
                    }
                    send(*row, Matrix::row_vector(&dr));
                    send(*x, dx);
                }
                Op::RepeatRow(row) => send(*row, Matrix::row_vector(&column_sums(&g))),
                Op::Scale(x, s) => send(*x, g.scale(*s)),
                Op::Silu(x) => {
                    let d = self.value(*x).zip_map(&g, |z, gz| {
                        let s = 1.0 / (1.0 + (-z).exp());
                        gz * s * (1.0 + z * (1.0 - s))
                    });
                    send(*x, d);
                }
                Op::LayerNorm { x, rstd } => {
                    let y = node.value.as_ref().expect("layer norm value");
                    let cols = y.cols() as f64;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mg = gr.iter().sum::<f64>() / cols;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = rstd[r] * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                    send(*x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - dot);
                        }
                    }
                    send(*x, dx);
                }
                Op::Rope { x, table } => send(*x, table.apply(&g, true)),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).rows();
                        send(*p, g.slice_rows(start, n));
                        start += n;
                    }
                }
                Op::SliceRows(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    send(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let d = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        send(*p, d);
                        offset += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    send(*x, dx);
                }
                Op::Gather(table, ids) => {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (a, b) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    send(*table, dt);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let inv = 1.0 / xv.rows() as f64;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        for (a, b) in dx.row_mut(r).iter_mut().zip(g.as_slice()) {
                            *a = b * inv;
                        }
                    }
                    send(*x, dx);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = node.value.as_ref().expect("normalize value");
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = (gr[c] - yr[c] * dot) / norms[r];
                        }
                    }
                    send(*x, dx);
                }
                Op::Mse { x, target } => {
                    let xv = self.value(*x);
                    let k = 2.0 * g.get(0, 0) / xv.len().max(1) as f64;
                    send(*x, xv.zip_map(target, |a, b| k * (a - b)));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = g.get(0, 0) / labels.len().max(1) as f64;
                    let mut d = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        let row = d.row_mut(r);
                        row[label] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= k);
                    }
                    send(*logits, d);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out
}
