//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value on the tape is a `rows x cols` matrix; vectors are single rows
//! and scalars are `1 x 1`. Operations append a node holding the forward value
//! and enough context to run its vector-Jacobian product; [`Tape::backward`]
//! walks the nodes in reverse. Nodes that cannot reach a trainable leaf are
//! marked constant and skipped on the way back.
//!
//! `detach` is a first-class primitive. A tape can record the values produced
//! by its detach calls and a second tape can replay them, which is what lets a
//! finite-difference check hold stop-gradient subexpressions fixed.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::special;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Recip(Var),
    Exp(Var),
    CappedExp(Var, f64),
    Log(Var),
    Digamma(Var),
    Lgamma(Var),
    Sum(Var),
    SumRows(Var),
    PickPerRow(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
enum DetachMode {
    #[default]
    Off,
    Record(Vec<Vec<f64>>),
    Replay(Vec<Vec<f64>>, usize),
}

/// Values produced by `detach` during one forward pass, in call order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetachRecord(Vec<Vec<f64>>);

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    detach: DetachMode,
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` is constant.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for a parameter, or `None` if it never reached the tape.
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|&(_, v)| self.grads[v.0].as_deref())
    }

    /// Add parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                let p = store.get_mut(id);
                for (acc, gi) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += gi;
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that remembers every detached value for later replay.
    pub fn recording() -> Self {
        Self { detach: DetachMode::Record(Vec::new()), ..Self::default() }
    }

    /// Tape whose detach calls return the recorded values in order.
    pub fn replaying(record: &DetachRecord) -> Self {
        Self { detach: DetachMode::Replay(record.0.clone(), 0), ..Self::default() }
    }

    pub fn detach_record(&self) -> DetachRecord {
        match &self.detach {
            DetachMode::Record(v) => DetachRecord(v.clone()),
            _ => DetachRecord::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape")
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- leaves ----

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::Shape(alloc::format!(
                "constant {rows}x{cols} given {} values",
                value.len()
            )));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    /// Leaf that takes part in differentiation without being a parameter.
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        let v = self.constant(rows, cols, value)?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.push(1, 1, vec![x], Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Each parameter is copied onto the
    /// tape at most once; frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id {
            self.param_vars.resize(id + 1, None);
        }
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let p = store.get(id);
        let (r, c) = p.value.dims2();
        let v = self.push(r, c, p.value.data().to_vec(), Op::Param, p.trainable);
        self.param_vars[id] = Some(v);
        v
    }

    /// Stop-gradient: same value, no backward path.
    pub fn detach(&mut self, a: Var) -> Var {
        let (rows, cols) = self.dims(a);
        let value = match &mut self.detach {
            DetachMode::Off => self.nodes[a.0].value.clone(),
            DetachMode::Record(log) => {
                let v = self.nodes[a.0].value.clone();
                log.push(v.clone());
                v
            }
            DetachMode::Replay(log, cursor) => {
                let v = log
                    .get(*cursor)
                    .cloned()
                    .filter(|v| v.len() == rows * cols)
                    .unwrap_or_else(|| self.nodes[a.0].value.clone());
                *cursor += 1;
                v
            }
        };
        self.push(rows, cols, value, Op::Leaf, false)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(alloc::format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(&self.node(a).value, &self.node(b).value, &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(alloc::format!("matmul_nt {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(&self.node(a).value, &self.node(b).value, &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::Shape(alloc::format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = zip_map(&self.node(a).value, &self.node(b).value, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let out = zip_map(&self.node(a).value, &self.node(b).value, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out = zip_map(&self.node(a).value, &self.node(b).value, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    /// Matrix plus a row vector broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::Shape(alloc::format!(
                "add_row: {r}x{c} plus {:?}",
                self.dims(row)
            )));
        }
        let b = &self.node(row).value;
        let mut out = self.node(a).value.clone();
        for chunk in out.chunks_mut(c) {
            for (o, bi) in chunk.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    /// Matrix times a column vector broadcast over columns (row `i` scaled by `col[i]`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(col) != (r, 1) {
            return Err(Error::Shape(alloc::format!(
                "mul_col: {r}x{c} times {:?}",
                self.dims(col)
            )));
        }
        let s = &self.node(col).value;
        let mut out = self.node(a).value.clone();
        for (i, chunk) in out.chunks_mut(c).enumerate() {
            chunk.iter_mut().for_each(|o| *o *= s[i]);
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(r, c, out, Op::MulCol(a, col), ng))
    }

    /// Elementwise product with a `1 x 1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(Error::Shape("scale_by expects a scalar node".into()));
        }
        let k = self.scalar(s);
        let (r, c) = self.dims(a);
        let out = self.node(a).value.iter().map(|x| x * k).collect();
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(r, c, out, Op::ScaleBy(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.node(a).value.iter().map(|x| x * k).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Scale(a, k), ng)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.node(a).value.iter().map(|x| x + k).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::AddConst(a), ng)
    }

    // ---- normalizations ----

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        self.check_finite(a, "softmax")?;
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::Softmax(a), ng))
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != c {
            return Err(Error::Shape(alloc::format!("causal_softmax needs square, got {r}x{c}")));
        }
        let mut out = self.node(a).value.clone();
        for (i, row) in out.chunks_mut(c).enumerate() {
            kernels::softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::CausalSoftmax(a), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        self.check_finite(a, "log_softmax")?;
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(c) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::LogSoftmax(a), ng))
    }

    /// Row-wise layer normalization followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::Shape("layer_norm gain/bias must be 1 x cols".into()));
        }
        let xv = &self.node(x).value;
        let g = &self.node(gain).value;
        let b = &self.node(bias).value;
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / libm::sqrt(var + EPS);
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    // ---- elementwise ----

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.node(a).value.iter().map(|&x| kernels::gelu(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.node(a).value.iter().map(|&x| x.max(0.0)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Relu(a), ng)
    }

    /// Elementwise `1 / x`.
    pub fn recip(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.node(a).value.iter().map(|&x| 1.0 / x).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Recip(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.node(a).value.iter().map(|&x| libm::exp(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Exp(a), ng)
    }

    /// `exp(min(x, ln cap))`; entries at the cap carry no gradient.
    pub fn capped_exp(&mut self, a: Var, cap: f64) -> Var {
        let lim = libm::log(cap);
        let (r, c) = self.dims(a);
        let out = self
            .node(a)
            .value
            .iter()
            .map(|&x| if x > lim { cap } else { libm::exp(x) })
            .collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::CappedExp(a, lim), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.node(a).value.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        let out = self.node(a).value.iter().map(|&x| libm::log(x)).collect();
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::Log(a), ng))
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self
            .node(a)
            .value
            .iter()
            .map(|&x| special::digamma(x))
            .collect::<Result<Vec<_>>>()?;
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::Digamma(a), ng))
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self
            .node(a)
            .value
            .iter()
            .map(|&x| special::lgamma(x))
            .collect::<Result<Vec<_>>>()?;
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::Lgamma(a), ng))
    }

    // ---- reductions and indexing ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a).value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums as an `rows x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.node(a).value.chunks(c).map(|row| row.iter().sum()).collect();
        let ng = self.ng(a);
        self.push(r, 1, out, Op::SumRows(a), ng)
    }

    /// Column `idx[i]` of row `i`, as an `rows x 1` column.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::Shape(alloc::format!(
                "pick_per_row: {r}x{c} with {} indices",
                idx.len()
            )));
        }
        let v = &self.node(a).value;
        let out = idx.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        let ng = self.ng(a);
        Ok(self.push(r, 1, out, Op::PickPerRow(a, idx.to_vec()), ng))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(alloc::format!("gather row {bad} from {n} rows")));
        }
        let t = &self.node(table).value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(ids.len(), d, out, Op::Gather(table, ids.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        let mut ng = false;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::Shape(alloc::format!("concat_rows: {pc} cols vs {c}")));
            }
            rows += r;
            out.extend_from_slice(&self.node(p).value);
            ng |= self.ng(p);
        }
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        let mut cols = 0;
        let mut ng = false;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::Shape(alloc::format!("concat_cols: {pr} rows vs {r}")));
            }
            cols += pc;
            ng |= self.ng(p);
        }
        let mut out = vec![0.0; r * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, pc) = self.dims(p);
            let v = &self.node(p).value;
            for i in 0..r {
                out[i * cols + offset..i * cols + offset + pc].copy_from_slice(&v[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        Ok(self.push(r, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(Error::Shape(alloc::format!("slice_rows {start}+{len} of {r}")));
        }
        let out = self.node(a).value[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(len, c, out, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(Error::Shape(alloc::format!("slice_cols {start}+{len} of {c}")));
        }
        let v = &self.node(a).value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), ng))
    }

    /// Forward value is the row-wise one-hot of `argmax(soft)`; the backward
    /// pass treats the node as the identity on `soft`.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let (r, c) = self.dims(soft);
        let v = &self.node(soft).value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let j = kernels::argmax(&v[i * c..(i + 1) * c]);
            out[i * c + j] = 1.0;
        }
        let ng = self.ng(soft);
        self.push(r, c, out, Op::StraightThrough(soft), ng)
    }

    fn check_finite(&self, a: Var, what: &str) -> Result<()> {
        if self.node(a).value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(alloc::format!("{what} input")))
        }
    }

    // ---- backward ----

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::Shape(alloc::format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(id, v)| v.map(|v| (id, v)))
            .collect();
        if !self.ng(loss) {
            return Ok(Gradients { grads, params });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.node_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    /// Backward pass whose parameter gradients are added to `store`.
    pub fn grad(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].needs_grad {
                let n = self.nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |ga| kernels::mm_nt(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| kernels::mm_tn(av, g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |ga| kernels::mm_nn(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| kernels::mm_tn(g, av, gb, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let av = &self.nodes[a.0].value;
                let cv = &self.nodes[col.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * cols + j] += g[i * cols + j] * cv[i];
                        }
                    }
                });
                acc(*col, &mut |gc| {
                    for i in 0..rows {
                        gc[i] += kernels::dot(&g[i * cols..(i + 1) * cols], &av[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::ScaleBy(a, s) => {
                let k = self.nodes[s.0].value[0];
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * k));
                acc(*s, &mut |gs| gs[0] += kernels::dot(g, av));
            }
            Op::Scale(a, k) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * k)),
            Op::AddConst(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..rows {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let s = kernels::dot(yr, gr);
                        for j in 0..cols {
                            ga[i * cols + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let s: f64 = gr.iter().sum();
                        for j in 0..cols {
                            ga[i * cols + j] += gr[j] - libm::exp(y[i * cols + j]) * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = &self.nodes[gain.0].value;
                acc(*x, &mut |gx| {
                    let n = cols as f64;
                    for i in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..cols {
                            let d = g[i * cols + j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xhat[i * cols + j];
                        }
                        for j in 0..cols {
                            let d = g[i * cols + j] * gv[j];
                            gx[i * cols + j] +=
                                inv_std[i] / n * (n * d - sum_d - xhat[i * cols + j] * sum_dx);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for i in 0..rows {
                        for j in 0..cols {
                            gg[j] += g[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for chunk in g.chunks(cols) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * kernels::gelu_grad(av[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Recip(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] -= g[i] * y[i] * y[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::CappedExp(a, lim) => {
                let y = &node.value;
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] <= *lim {
                            ga[i] += g[i] * y[i];
                        }
                    }
                });
            }
            Op::Log(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::Digamma(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * special::trigamma_unchecked(av[i]);
                    }
                });
            }
            Op::Lgamma(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * special::digamma_unchecked(av[i]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SumRows(a) => {
                let c = self.dims(*a).1;
                acc(*a, &mut |ga| {
                    for (i, chunk) in ga.chunks_mut(c).enumerate() {
                        chunk.iter_mut().for_each(|x| *x += g[i]);
                    }
                });
            }
            Op::PickPerRow(a, idx) => {
                let c = self.dims(*a).1;
                acc(*a, &mut |ga| {
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * c + j] += g[i];
                    }
                });
            }
            Op::Gather(table, ids) => {
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    acc(p, &mut |gp| {
                        for i in 0..rows {
                            add_into(
                                &mut gp[i * pc..(i + 1) * pc],
                                &g[i * cols + offset..i * cols + offset + pc],
                            );
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceRows(a, start) => {
                acc(*a, &mut |ga| add_into(&mut ga[start * cols..(start + rows) * cols], g));
            }
            Op::SliceCols(a, start) => {
                let c = self.dims(*a).1;
                acc(*a, &mut |ga| {
                    for i in 0..rows {
                        add_into(&mut ga[i * c + start..i * c + start + cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::StraightThrough(soft) => acc(*soft, &mut |gs| add_into(gs, g)),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) mod kernels {
    /// `c += a (m x k) · b (k x n)`.
    pub fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    }

    /// `c += a (m x k) · bᵀ` where `b` is `n x k`.
    pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// `c += aᵀ · b` where `a` is `m x k`, `b` is `m x n`, `c` is `k x n`.
    pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for p in 0..m {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..k {
                let api = a[p * k + i];
                if api == 0.0 {
                    continue;
                }
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += api * bv;
                }
            }
        }
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = [0.0f64; 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            for l in 0..4 {
                acc[l] += a[c * 4 + l] * b[c * 4 + l];
            }
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for i in chunks * 4..a.len() {
            s += a[i] * b[i];
        }
        s
    }

    pub fn softmax_in_place(row: &mut [f64]) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = libm::exp(*x - max);
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }

    pub fn log_sum_exp(row: &[f64]) -> f64 {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>())
    }

    /// First index of the maximum.
    pub fn argmax(row: &[f64]) -> usize {
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        best
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044_715 * x * x * x)))
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let t = libm::tanh(GELU_C * (x + 0.044_715 * x * x * x));
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
    }
}
