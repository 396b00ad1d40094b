//! Dynamic reverse-mode tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! the handles of its inputs. Nodes only reference earlier nodes, so walking
//! the tape backwards is a valid topological order. The tape is rebuilt for
//! every forward pass because head selection makes the graph data-dependent.

use std::sync::Arc;

use super::tensor::{check_same, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddRowsAt { base: Var, delta: Var, offset: usize },
    Scale(Var, f64),
    Affine(Var, f64),
    Mul(Var, Var),
    Square(Var),
    MulConst(Var, Arc<[f64]>),
    Gelu(Var),
    Softmax(Var),
    NormalizeRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectBlock { x: Var, rows: Vec<usize>, col_start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    ScaleRowsBy { x: Var, coef: Var, col: usize },
    MeanRows(Var),
    Sum(Var),
    IndexSum { x: Var, idx: Vec<usize> },
    Div(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

/// Ordered record of executed operations with their values and gradients.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Adds an input tensor. Only leaves created with `requires_grad` collect
    /// gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].matmul(&self.values[b.0])?;
        let r = self.any(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), r))
    }

    /// `a · bᵀ`, the linear-layer product for weights stored `[out×in]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = av.dims2();
        let (n, k2) = bv.dims2();
        if k != k2 {
            return Err(dim_err(
                "matmul_bt",
                format!("{:?} x {:?}ᵀ: inner dimensions {k} and {k2} differ", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        let r = self.any(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), r))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].add(&self.values[b.0])?;
        let r = self.any(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), r))
    }

    /// Adds a length-n row vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (&self.values[a.0], &self.values[row.0]);
        let (m, n) = av.dims2();
        if rv.len() != n {
            return Err(dim_err("add_row", format!("{:?} + row {:?}", av.shape(), rv.shape())));
        }
        let mut out = av.data().to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let r = self.any(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), r))
    }

    /// `base` with `delta` added onto rows `offset..offset+delta.rows()`.
    pub fn add_rows_at(&mut self, base: Var, delta: Var, offset: usize) -> Result<Var> {
        let (bv, dv) = (&self.values[base.0], &self.values[delta.0]);
        let (m, n) = bv.dims2();
        let (k, n2) = dv.dims2();
        if n != n2 || offset + k > m {
            return Err(dim_err(
                "add_rows_at",
                format!("{:?} + {:?} at row {offset}", bv.shape(), dv.shape()),
            ));
        }
        let mut out = bv.data().to_vec();
        for (o, d) in out[offset * n..(offset + k) * n].iter_mut().zip(dv.data()) {
            *o += d;
        }
        let out = Tensor::new(bv.shape().to_vec(), out)?;
        let r = self.any(&[base, delta]);
        Ok(self.push(out, Op::AddRowsAt { base, delta, offset }, r))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.values[a.0].scale(s);
        let r = self.requires[a.0];
        self.push(out, Op::Scale(a, s), r)
    }

    /// `mul·a + add`, elementwise.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let v = &self.values[a.0];
        let data = v.data().iter().map(|x| mul * x + add).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let r = self.requires[a.0];
        self.push(out, Op::Affine(a, mul), r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        check_same("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let r = self.any(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), r))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let data = v.data().iter().map(|x| x * x).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let r = self.requires[a.0];
        self.push(out, Op::Square(a), r)
    }

    /// Elementwise product with a constant of the same length (e.g. a 0/1 mask).
    pub fn mul_const(&mut self, a: Var, c: Arc<[f64]>) -> Result<Var> {
        let v = &self.values[a.0];
        if c.len() != v.len() {
            return Err(dim_err("mul_const", format!("{:?} vs {} constants", v.shape(), c.len())));
        }
        let data = v.data().iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let r = self.requires[a.0];
        Ok(self.push(out, Op::MulConst(a, c), r))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let data = v
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let r = self.requires[a.0];
        self.push(out, Op::Gelu(a), r)
    }

    /// Row-wise softmax; masked (`false`) entries are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = softmax_rows_value(&self.values[a.0], mask)?;
        let r = self.requires[a.0];
        Ok(self.push(out, Op::Softmax(a), r))
    }

    /// Divides every row by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = &self.values[a.0];
        let (m, n) = v.dims2();
        let mut out = v.data().to_vec();
        for i in 0..m {
            let s: f64 = out[i * n..(i + 1) * n].iter().sum();
            if s == 0.0 {
                return Err(Error::Numeric(format!("normalize_rows: row {i} sums to zero")));
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|x| *x /= s);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let r = self.requires[a.0];
        Ok(self.push(out, Op::NormalizeRows(a), r))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (&self.values[x.0], &self.values[gain.0], &self.values[bias.0]);
        let (m, n) = xv.dims2();
        if gv.len() != n || bv.len() != n {
            return Err(dim_err(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let r = self.any(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, r))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.values[x.0];
        let (m, n) = v.dims2();
        if len == 0 || start + len > m {
            return Err(dim_err("slice_rows", format!("rows {start}..{} of {:?}", start + len, v.shape())));
        }
        let out = Tensor::new(vec![len, n], v.data()[start * n..(start + len) * n].to_vec())?;
        let r = self.requires[x.0];
        Ok(self.push(out, Op::SliceRows { x, start }, r))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.values[parts.first().ok_or_else(|| dim_err("concat_rows", "no inputs"))?.0].cols();
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            let v = &self.values[p.0];
            if v.cols() != n {
                return Err(dim_err("concat_rows", format!("width {n} vs {:?}", v.shape())));
            }
            m += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![m, n], data)?;
        let r = self.any(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), r))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.values[x.0];
        let (m, n) = v.dims2();
        if len == 0 || start + len > n {
            return Err(dim_err("slice_cols", format!("cols {start}..{} of {:?}", start + len, v.shape())));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let r = self.requires[x.0];
        Ok(self.push(out, Op::SliceCols { x, start }, r))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.values[parts.first().ok_or_else(|| dim_err("concat_cols", "no inputs"))?.0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.values[p.0].cols()).collect();
        if parts.iter().any(|p| self.values[p.0].rows() != m) {
            return Err(dim_err("concat_cols", "inputs differ in row count"));
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.values[p.0].row(i));
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let r = self.any(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), r))
    }

    /// Copies the listed rows restricted to columns `col_start..col_start+col_len`.
    pub fn select_block(&mut self, x: Var, rows: &[usize], col_start: usize, col_len: usize) -> Result<Var> {
        let v = &self.values[x.0];
        let (m, n) = v.dims2();
        if rows.is_empty() || rows.iter().any(|&r| r >= m) || col_len == 0 || col_start + col_len > n {
            return Err(dim_err(
                "select_block",
                format!("rows {rows:?}, cols {col_start}..{} of {:?}", col_start + col_len, v.shape()),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * col_len);
        for &r in rows {
            data.extend_from_slice(&v.row(r)[col_start..col_start + col_len]);
        }
        let out = Tensor::new(vec![rows.len(), col_len], data)?;
        let req = self.requires[x.0];
        Ok(self.push(out, Op::SelectBlock { x, rows: rows.to_vec(), col_start }, req))
    }

    /// Embedding lookup: one table row per id.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = &self.values[table.0];
        let (m, n) = v.dims2();
        if ids.is_empty() {
            return Err(dim_err("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::Index(format!("id {bad} outside table of {m} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        let r = self.requires[table.0];
        Ok(self.push(out, Op::GatherRows { table, ids: ids.to_vec() }, r))
    }

    /// `y[i,:] = x[i,:] · coef[i', col]`, where `i' = i` when `coef` has one
    /// row per row of `x` and `i' = 0` when `coef` is a single broadcast row.
    pub fn scale_rows_by(&mut self, x: Var, coef: Var, col: usize) -> Result<Var> {
        let (xv, cv) = (&self.values[x.0], &self.values[coef.0]);
        let (m, n) = xv.dims2();
        let (cm, cn) = cv.dims2();
        if col >= cn || (cm != m && cm != 1) {
            return Err(dim_err(
                "scale_rows_by",
                format!("{:?} by column {col} of {:?}", xv.shape(), cv.shape()),
            ));
        }
        let mut out = xv.data().to_vec();
        for i in 0..m {
            let s = cv.get(if cm == 1 { 0 } else { i }, col);
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(vec![m, n], out)?;
        let r = self.any(&[x, coef]);
        Ok(self.push(out, Op::ScaleRowsBy { x, coef, col }, r))
    }

    /// Column-wise mean, returned as a `[1×n]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let out = mean_pool_rows(&self.values[x.0])?;
        let r = self.requires[x.0];
        Ok(self.push(out, Op::MeanRows(x), r))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        let r = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x), r)
    }

    /// Sum of the flat entries at `idx`.
    pub fn index_sum(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = &self.values[x.0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::Index(format!("index {bad} outside tensor of {} values", v.len())));
        }
        let s = idx.iter().map(|&i| v.data()[i]).sum();
        let r = self.requires[x.0];
        Ok(self.push(Tensor::scalar(s), Op::IndexSum { x, idx: idx.to_vec() }, r))
    }

    /// Scalar division `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.len() != 1 || bv.len() != 1 {
            return Err(dim_err("div", format!("{:?} / {:?}: scalars expected", av.shape(), bv.shape())));
        }
        if bv.item() == 0.0 {
            return Err(Error::Numeric("division by zero".into()));
        }
        let out = Tensor::scalar(av.item() / bv.item());
        let r = self.any(&[a, b]);
        Ok(self.push(out, Op::Div(a, b), r))
    }

    /// Mean over rows of `-log softmax(logits_t)[target_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = &self.values[logits.0];
        let (t, vocab) = v.dims2();
        if targets.len() != t {
            return Err(dim_err("cross_entropy", format!("{:?} logits vs {} targets", v.shape(), targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
            return Err(Error::Index(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let probs = softmax_rows_value(v, None)?;
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = v.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= t as f64;
        let r = self.requires[logits.0];
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs: probs.into_data() };
        Ok(self.push(Tensor::scalar(loss), op, r))
    }

    /// Reverse pass from a one-element output. Leaf gradients accumulate
    /// additively across calls; intermediate gradients are rebuilt each call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(dim_err("backward", format!("root must be scalar, got {:?}", self.values[root.0].shape())));
        }
        for (i, op) in self.ops.iter().enumerate() {
            if !matches!(op, Op::Leaf) {
                self.grads[i] = None;
            }
        }
        if !self.requires[root.0] {
            return Ok(());
        }
        let Tape { values, ops, requires, grads } = self;
        accumulate(grads, requires, values, root, |g| g[0] += 1.0);
        for i in (0..=root.0).rev() {
            if matches!(ops[i], Op::Leaf) || !requires[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_op(&ops[i], &g, i, values, requires, grads);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    requires: &[bool],
    values: &[Tensor],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if !requires[v.0] {
        return;
    }
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; values[v.0].len()]);
    f(g);
}

fn backward_op(
    op: &Op,
    g: &[f64],
    out_idx: usize,
    values: &[Tensor],
    requires: &[bool],
    grads: &mut [Option<Vec<f64>>],
) {
    let out = &values[out_idx];
    let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| accumulate(grads, requires, values, v, |x| f(x));
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = values[a.0].dims2();
            let n = values[b.0].cols();
            acc(*a, &mut |ga| gemm_nt(g, values[b.0].data(), ga, m, n, k));
            acc(*b, &mut |gb| gemm_tn(values[a.0].data(), g, gb, m, k, n));
        }
        Op::MatMulBt(a, b) => {
            let (m, k) = values[a.0].dims2();
            let n = values[b.0].rows();
            acc(*a, &mut |ga| gemm_nn(g, values[b.0].data(), ga, m, n, k));
            acc(*b, &mut |gb| gemm_tn(g, values[a.0].data(), gb, m, n, k));
        }
        Op::Add(a, b) => {
            acc(*a, &mut |ga| add_into(ga, g));
            acc(*b, &mut |gb| add_into(gb, g));
        }
        Op::AddRow(a, row) => {
            acc(*a, &mut |ga| add_into(ga, g));
            let n = values[row.0].len();
            acc(*row, &mut |gr| {
                for chunk in g.chunks(n) {
                    add_into(gr, chunk);
                }
            });
        }
        Op::AddRowsAt { base, delta, offset } => {
            acc(*base, &mut |gb| add_into(gb, g));
            let n = out.cols();
            let k = values[delta.0].rows();
            acc(*delta, &mut |gd| add_into(gd, &g[offset * n..(offset + k) * n]));
        }
        Op::Scale(a, s) | Op::Affine(a, s) => {
            acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
        }
        Op::Mul(a, b) => {
            acc(*a, &mut |ga| {
                for ((x, y), bv) in ga.iter_mut().zip(g).zip(values[b.0].data()) {
                    *x += y * bv;
                }
            });
            acc(*b, &mut |gb| {
                for ((x, y), av) in gb.iter_mut().zip(g).zip(values[a.0].data()) {
                    *x += y * av;
                }
            });
        }
        Op::Square(a) => {
            acc(*a, &mut |ga| {
                for ((x, y), av) in ga.iter_mut().zip(g).zip(values[a.0].data()) {
                    *x += 2.0 * av * y;
                }
            });
        }
        Op::MulConst(a, c) => {
            acc(*a, &mut |ga| {
                for ((x, y), cv) in ga.iter_mut().zip(g).zip(c.iter()) {
                    *x += y * cv;
                }
            });
        }
        Op::Gelu(a) => {
            acc(*a, &mut |ga| {
                for ((x, y), &v) in ga.iter_mut().zip(g).zip(values[a.0].data()) {
                    let inner = GELU_C * (v + 0.044715 * v * v * v);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
                    *x += y * d;
                }
            });
        }
        Op::Softmax(a) => {
            let (m, n) = out.dims2();
            acc(*a, &mut |ga| {
                for i in 0..m {
                    let p = &out.data()[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..n {
                        ga[i * n + j] += p[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::NormalizeRows(a) => {
            let (m, n) = out.dims2();
            let x = &values[a.0];
            acc(*a, &mut |ga| {
                for i in 0..m {
                    let s: f64 = x.row(i).iter().sum();
                    let y = &out.data()[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        ga[i * n + j] += (gr[j] - dot) / s;
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let (m, n) = out.dims2();
            let gv = values[gain.0].data();
            acc(*x, &mut |gx| {
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let xh = &xhat[i * n..(i + 1) * n];
                    let dxh: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                    let mean_d = dxh.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxh.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[i * n + j] += rstd[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                    }
                }
            });
            acc(*gain, &mut |gg| {
                for i in 0..m {
                    for j in 0..n {
                        gg[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
            });
            acc(*bias, &mut |gb| {
                for chunk in g.chunks(n) {
                    add_into(gb, chunk);
                }
            });
        }
        Op::SliceRows { x, start } => {
            let n = out.cols();
            let len = out.rows();
            acc(*x, &mut |gx| add_into(&mut gx[start * n..(start + len) * n], g));
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let len = values[p.0].len();
                acc(*p, &mut |gp| add_into(gp, &g[off..off + len]));
                off += len;
            }
        }
        Op::SliceCols { x, start } => {
            let (m, len) = out.dims2();
            let n = values[x.0].cols();
            acc(*x, &mut |gx| {
                for i in 0..m {
                    add_into(&mut gx[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let (m, n) = out.dims2();
            let mut off = 0;
            for p in parts {
                let w = values[p.0].cols();
                acc(*p, &mut |gp| {
                    for i in 0..m {
                        add_into(&mut gp[i * w..(i + 1) * w], &g[i * n + off..i * n + off + w]);
                    }
                });
                off += w;
            }
        }
        Op::SelectBlock { x, rows, col_start } => {
            let len = out.cols();
            let n = values[x.0].cols();
            acc(*x, &mut |gx| {
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut gx[r * n + col_start..r * n + col_start + len], &g[k * len..(k + 1) * len]);
                }
            });
        }
        Op::GatherRows { table, ids } => {
            let n = out.cols();
            acc(*table, &mut |gt| {
                for (k, &r) in ids.iter().enumerate() {
                    add_into(&mut gt[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                }
            });
        }
        Op::ScaleRowsBy { x, coef, col } => {
            let (m, n) = out.dims2();
            let cv = &values[coef.0];
            let (cm, cn) = cv.dims2();
            let xv = &values[x.0];
            let ci = |i: usize| if cm == 1 { 0 } else { i };
            acc(*x, &mut |gx| {
                for i in 0..m {
                    let s = cv.get(ci(i), *col);
                    for j in 0..n {
                        gx[i * n + j] += s * g[i * n + j];
                    }
                }
            });
            acc(*coef, &mut |gc| {
                for i in 0..m {
                    let d: f64 = xv.row(i).iter().zip(&g[i * n..(i + 1) * n]).map(|(a, b)| a * b).sum();
                    gc[ci(i) * cn + col] += d;
                }
            });
        }
        Op::MeanRows(x) => {
            let (m, n) = values[x.0].dims2();
            acc(*x, &mut |gx| {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j] / m as f64;
                    }
                }
            });
        }
        Op::Sum(x) => {
            acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0]));
        }
        Op::IndexSum { x, idx } => {
            acc(*x, &mut |gx| idx.iter().for_each(|&i| gx[i] += g[0]));
        }
        Op::Div(a, b) => {
            let (av, bv) = (values[a.0].item(), values[b.0].item());
            acc(*a, &mut |ga| ga[0] += g[0] / bv);
            acc(*b, &mut |gb| gb[0] -= g[0] * av / (bv * bv));
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let (t, v) = values[logits.0].dims2();
            let scale = g[0] / t as f64;
            acc(*logits, &mut |gl| {
                for (i, &y) in targets.iter().enumerate() {
                    for j in 0..v {
                        let ind = if j == y { 1.0 } else { 0.0 };
                        gl[i * v + j] += scale * (probs[i * v + j] - ind);
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise stabilized softmax with optional mask.
pub fn softmax_rows_value(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (m, n) = x.dims2();
    if let Some(mask) = mask {
        if mask.len() != m * n {
            return Err(dim_err("softmax_rows", format!("mask of {} for {:?}", mask.len(), x.shape())));
        }
    }
    let visible = |i: usize| mask.is_none_or(|mk| mk[i]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let (mut max, mut any) = (f64::NEG_INFINITY, false);
        for j in 0..n {
            if visible(i * n + j) {
                // NaN must propagate; `f64::max` would drop it.
                max = if row[j].is_nan() || max.is_nan() { f64::NAN } else { max.max(row[j]) };
                any = true;
            }
        }
        if !any || max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut total = 0.0;
        for j in 0..n {
            if visible(i * n + j) {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                total += e;
            }
        }
        out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Column-wise arithmetic mean of an `[m×n]` matrix as a `[1×n]` row.
pub fn mean_pool_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2();
    if m == 0 || x.is_empty() {
        return Err(dim_err("mean_pool_rows", "empty input"));
    }
    let mut out = vec![0.0; n];
    for i in 0..m {
        add_into(&mut out, x.row(i));
    }
    out.iter_mut().for_each(|v| *v /= m as f64);
    Tensor::new(vec![1, n], out)
}
