//! Tape-based reverse-mode automatic differentiation.
//!
//! Every value in a [`Graph`] is a row-major matrix. Operations append nodes
//! to the tape; [`Graph::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products. Nodes that do not depend on a trainable leaf are
//! skipped during the backward pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::real::gemm;
use crate::nn::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major matrix stored on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Value<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Value<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "value extent mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![F::zero(); rows * cols])
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn scalar(&self) -> F {
        self.data[0]
    }
}

/// How the rows of a sequence matrix map onto (step, item) pairs.
///
/// Time-major layouts place step `t` of item `b` at row `t * batch + b`;
/// item-major layouts use `b * steps + t`. Steps at or beyond an item's
/// length are treated as zero padding by sequence operations.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqLayout {
    pub steps: usize,
    pub batch: usize,
    pub time_major: bool,
    pub lengths: Option<Vec<usize>>,
}

impl SeqLayout {
    pub fn single(steps: usize) -> Self {
        Self {
            steps,
            batch: 1,
            time_major: true,
            lengths: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.steps * self.batch
    }

    pub fn row(&self, t: usize, b: usize) -> usize {
        if self.time_major {
            t * self.batch + b
        } else {
            b * self.steps + t
        }
    }

    pub fn len_of(&self, b: usize) -> usize {
        self.lengths.as_ref().map_or(self.steps, |l| l[b])
    }
}

/// One CTC term: the rows (in time order) holding the item's log-probabilities
/// and its label sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcItem {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddRepeatRows { x: NodeId, y: NodeId, block: usize },
    Scale(NodeId, F),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    GatherRows { x: NodeId, index: Vec<Option<usize>> },
    Reshape(NodeId),
    Conv1d { x: NodeId, w: NodeId, layout: SeqLayout, kernel: usize },
    LstmCellC { gates: NodeId, c: NodeId },
    LstmCellH { gates: NodeId, c_new: NodeId },
    GruCell { gx: NodeId, gh: NodeId, h: NodeId },
    AttendContext { w: NodeId, mem: NodeId },
    Sum(NodeId),
    MaskedMse { pred: NodeId, target: Vec<F>, rows: Vec<bool> },
    BceLogits { logits: NodeId, target: Vec<F>, rows: Vec<bool> },
    Ctc { logp: NodeId, items: Vec<CtcItem>, blank: usize },
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, NodeId>,
    param_order: Vec<(String, NodeId)>,
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn dims_err(msg: String) -> Error {
    Error::DimensionMismatch(msg)
}

fn log_sum_exp<F: Real>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum number of frames a CTC label needs: one per symbol plus a blank
/// between each pair of identical neighbours.
pub fn ctc_required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Log-space forward variables for one item. Returns (alpha, nll).
fn ctc_alpha<F: Real>(lp: &dyn Fn(usize, usize) -> F, t_len: usize, ext: &[usize]) -> (Vec<F>, F) {
    let s_len = ext.len();
    let ninf = F::neg_infinity();
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_sum_exp(acc, prev[s - 1]);
            }
            if s >= 2 && ext[s] != ext[s - 2] {
                acc = log_sum_exp(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let mut ll = last[s_len - 1];
    if s_len >= 2 {
        ll = log_sum_exp(ll, last[s_len - 2]);
    }
    (alpha, -ll)
}

fn ctc_beta<F: Real>(lp: &dyn Fn(usize, usize) -> F, t_len: usize, ext: &[usize]) -> Vec<F> {
    let s_len = ext.len();
    let ninf = F::neg_infinity();
    let mut beta = vec![ninf; t_len * s_len];
    let base = (t_len - 1) * s_len;
    beta[base + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len >= 2 {
        beta[base + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_sum_exp(acc, next[s + 1]);
            }
            if s + 2 < s_len && ext[s] != ext[s + 2] {
                acc = log_sum_exp(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }
    beta
}

fn ctc_extend(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Builds the zero-padded im2col matrix of a same-length 1-D convolution.
fn im2col<F: Real>(x: &Value<F>, layout: &SeqLayout, kernel: usize) -> Vec<F> {
    let c_in = x.cols;
    let width = c_in * kernel;
    let half = kernel / 2;
    let mut col = vec![F::zero(); layout.rows() * width];
    for b in 0..layout.batch {
        let len = layout.len_of(b);
        for t in 0..len {
            let dst = layout.row(t, b) * width;
            for k in 0..kernel {
                let src_t = t as isize + k as isize - half as isize;
                if src_t < 0 || src_t as usize >= len {
                    continue;
                }
                let src = x.row(layout.row(src_t as usize, b));
                for c in 0..c_in {
                    col[dst + c * kernel + k] = src[c];
                }
            }
        }
    }
    col
}

fn col2im<F: Real>(dcol: &[F], dx: &mut [F], c_in: usize, layout: &SeqLayout, kernel: usize) {
    let width = c_in * kernel;
    let half = kernel / 2;
    for b in 0..layout.batch {
        let len = layout.len_of(b);
        for t in 0..len {
            let src = layout.row(t, b) * width;
            for k in 0..kernel {
                let dst_t = t as isize + k as isize - half as isize;
                if dst_t < 0 || dst_t as usize >= len {
                    continue;
                }
                let dst = layout.row(dst_t as usize, b) * c_in;
                for c in 0..c_in {
                    dx[dst + c] += dcol[src + c * kernel + k];
                }
            }
        }
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Value<F> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows, v.cols)
    }

    pub fn scalar(&self, id: NodeId) -> F {
        self.nodes[id.0].value.data[0]
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<NodeId> {
        if rows * cols != data.len() {
            return Err(dims_err(format!(
                "constant {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(self.push(Value::new(rows, cols, data), Op::Leaf, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(Value::zeros(rows, cols), Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used by gradient checks).
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<NodeId> {
        if rows * cols != data.len() {
            return Err(dims_err(format!("input {rows}x{cols} given {} values", data.len())));
        }
        Ok(self.push(Value::new(rows, cols, data), Op::Leaf, true))
    }

    /// Binds a named parameter from the store. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let t = store.expect(name)?;
        let (rows, cols) = t.matrix_dims();
        let trainable = !store.is_frozen(name);
        let id = self.push(Value::new(rows, cols, t.data().to_vec()), Op::Leaf, trainable);
        self.params.insert(name.to_string(), id);
        self.param_order.push((name.to_string(), id));
        Ok(id)
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(dims_err(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value.data,
            false,
            &self.nodes[b.0].value.data,
            false,
            &mut out,
            false,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Value::new(m, n, out), Op::MatMul(a, b), ng))
    }

    fn same_dims(&self, a: NodeId, b: NodeId, what: &str) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(dims_err(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<NodeId> {
        let (r, c) = self.same_dims(a, b, "elementwise")?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Value::new(r, c, data), op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 x n` row vector to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        let (br, bc) = self.dims(bias);
        if br * bc != c {
            return Err(dims_err(format!("bias of {} values for {c} columns", br * bc)));
        }
        let bv = &self.nodes[bias.0].value.data;
        let mut data = self.nodes[x.0].value.data.clone();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bv) {
                *v += *b;
            }
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(Value::new(r, c, data), Op::AddBias(x, bias), ng))
    }

    /// `out[b * block + j] = x[b * block + j] + y[b]`.
    pub fn add_repeat_rows(&mut self, x: NodeId, y: NodeId, block: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        let (yr, yc) = self.dims(y);
        if yc != c || yr * block != r {
            return Err(dims_err(format!(
                "repeat-add of {yr}x{yc} in blocks of {block} onto {r}x{c}"
            )));
        }
        let yv = &self.nodes[y.0].value.data;
        let mut data = self.nodes[x.0].value.data.clone();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let src = &yv[(i / block) * c..(i / block + 1) * c];
            for (v, s) in row.iter_mut().zip(src) {
                *v += *s;
            }
        }
        let ng = self.ng(&[x, y]);
        Ok(self.push(Value::new(r, c, data), Op::AddRepeatRows { x, y, block }, ng))
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Value::new(v.rows, v.cols, v.data.iter().map(|&a| a * s).collect());
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    fn unary(&mut self, x: NodeId, op: Op<F>, f: impl Fn(F) -> F) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Value::new(v.rows, v.cols, v.data.iter().map(|&a| f(a)).collect());
        let ng = self.ng(&[x]);
        self.push(out, op, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), |a| a.tanh())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |a| if a > F::zero() { a } else { F::zero() })
    }

    /// Row-wise softmax. With `valid_cols`, row `r` only spans its first
    /// `valid_cols[r]` columns; the rest are exactly zero.
    pub fn softmax_rows(&mut self, x: NodeId, valid_cols: Option<&[usize]>) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if let Some(v) = valid_cols {
            if v.len() != r || v.iter().any(|&n| n == 0 || n > c) {
                return Err(dims_err("softmax mask does not fit the input".into()));
            }
        }
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let n = valid_cols.map_or(c, |v| v[i]);
            let row = &xv[i * c..i * c + n];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (o, &a) in out[i * c..i * c + n].iter_mut().zip(row) {
                *o = (a - m).exp();
                z += *o;
            }
            for o in &mut out[i * c..i * c + n] {
                *o = *o / z;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Value::new(r, c, out), Op::SoftmaxRows(x), ng))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&a| (a - m).exp()).sum::<F>().ln();
            for (o, &a) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = a - lse;
            }
        }
        let ng = self.ng(&[x]);
        self.push(Value::new(r, c, out), Op::LogSoftmaxRows(x), ng)
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(dims_err("concat_cols row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Value::new(rows, cols, out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != cols) {
            return Err(dims_err("concat_rows column counts differ".into()));
        }
        let rows: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let ng = self.ng(parts);
        Ok(self.push(Value::new(rows, cols, out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(dims_err(format!("columns {start}..{} of {c}", start + len)));
        }
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Value::new(r, len, out), Op::SliceCols { x, start }, ng))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(dims_err(format!("rows {start}..{} of {r}", start + len)));
        }
        let out = self.nodes[x.0].value.data[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Value::new(len, c, out), Op::SliceRows { x, start }, ng))
    }

    /// Builds a matrix whose row `i` is row `index[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: NodeId, index: Vec<Option<usize>>) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if index.iter().flatten().any(|&i| i >= r) {
            return Err(dims_err("gather index out of range".into()));
        }
        let v = &self.nodes[x.0].value;
        let mut out = vec![F::zero(); index.len() * c];
        for (i, src) in index.iter().enumerate() {
            if let Some(s) = src {
                out[i * c..(i + 1) * c].copy_from_slice(v.row(*s));
            }
        }
        let ng = self.ng(&[x]);
        let n = index.len();
        Ok(self.push(Value::new(n, c, out), Op::GatherRows { x, index }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if r * c != rows * cols {
            return Err(dims_err(format!("reshape {r}x{c} to {rows}x{cols}")));
        }
        let data = self.nodes[x.0].value.data.clone();
        let ng = self.ng(&[x]);
        Ok(self.push(Value::new(rows, cols, data), Op::Reshape(x), ng))
    }

    // ---- sequence ops ---------------------------------------------------

    /// Same-length 1-D convolution along the step axis of `layout`.
    ///
    /// `w` is `c_out x (c_in * kernel)`, i.e. a `[c_out, c_in, kernel]`
    /// tensor flattened row-major. Padded rows of the output are zero.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, kernel: usize, layout: SeqLayout) -> Result<NodeId> {
        if kernel % 2 == 0 {
            return Err(Error::EvenKernel(kernel));
        }
        let (rows, c_in) = self.dims(x);
        let (c_out, wc) = self.dims(w);
        if rows != layout.rows() {
            return Err(dims_err(format!("conv input has {rows} rows, layout {}", layout.rows())));
        }
        if wc != c_in * kernel {
            return Err(dims_err(format!(
                "conv kernel width {wc} for {c_in} channels x {kernel} taps"
            )));
        }
        let col = im2col(&self.nodes[x.0].value, &layout, kernel);
        let mut out = vec![F::zero(); rows * c_out];
        gemm(rows, wc, c_out, &col, false, &self.nodes[w.0].value.data, true, &mut out, false);
        let ng = self.ng(&[x, w]);
        Ok(self.push(
            Value::new(rows, c_out, out),
            Op::Conv1d {
                x,
                w,
                layout,
                kernel,
            },
            ng,
        ))
    }

    /// LSTM cell state update. `gates` is `B x 4H` laid out as (input, forget,
    /// cell, output) pre-activations.
    pub fn lstm_cell_c(&mut self, gates: NodeId, c: NodeId) -> Result<NodeId> {
        let (b, g4) = self.dims(gates);
        let (cb, h) = self.dims(c);
        if cb != b || g4 != 4 * h {
            return Err(dims_err(format!("lstm gates {b}x{g4} with cell {cb}x{h}")));
        }
        let gv = &self.nodes[gates.0].value.data;
        let cv = &self.nodes[c.0].value.data;
        let mut out = vec![F::zero(); b * h];
        for r in 0..b {
            let g = &gv[r * g4..(r + 1) * g4];
            for j in 0..h {
                let i = sigmoid(g[j]);
                let f = sigmoid(g[h + j]);
                let cand = g[2 * h + j].tanh();
                out[r * h + j] = f * cv[r * h + j] + i * cand;
            }
        }
        let ng = self.ng(&[gates, c]);
        Ok(self.push(Value::new(b, h, out), Op::LstmCellC { gates, c }, ng))
    }

    /// LSTM hidden output `sigmoid(o) * tanh(c_new)`.
    pub fn lstm_cell_h(&mut self, gates: NodeId, c_new: NodeId) -> Result<NodeId> {
        let (b, g4) = self.dims(gates);
        let (cb, h) = self.dims(c_new);
        if cb != b || g4 != 4 * h {
            return Err(dims_err(format!("lstm gates {b}x{g4} with cell {cb}x{h}")));
        }
        let gv = &self.nodes[gates.0].value.data;
        let cv = &self.nodes[c_new.0].value.data;
        let mut out = vec![F::zero(); b * h];
        for r in 0..b {
            for j in 0..h {
                let o = sigmoid(gv[r * g4 + 3 * h + j]);
                out[r * h + j] = o * cv[r * h + j].tanh();
            }
        }
        let ng = self.ng(&[gates, c_new]);
        Ok(self.push(Value::new(b, h, out), Op::LstmCellH { gates, c_new }, ng))
    }

    /// GRU update: `gx` and `gh` are `B x 3H` (reset, update, new) input and
    /// hidden projections, biases included.
    pub fn gru_cell(&mut self, gx: NodeId, gh: NodeId, h: NodeId) -> Result<NodeId> {
        let (b, g3) = self.dims(gx);
        let (hb, hd) = self.dims(h);
        if self.dims(gh) != (b, g3) || hb != b || g3 != 3 * hd {
            return Err(dims_err(format!("gru gates {b}x{g3} with hidden {hb}x{hd}")));
        }
        let xv = &self.nodes[gx.0].value.data;
        let hv = &self.nodes[gh.0].value.data;
        let prev = &self.nodes[h.0].value.data;
        let mut out = vec![F::zero(); b * hd];
        for r in 0..b {
            let x = &xv[r * g3..(r + 1) * g3];
            let y = &hv[r * g3..(r + 1) * g3];
            for j in 0..hd {
                let rg = sigmoid(x[j] + y[j]);
                let z = sigmoid(x[hd + j] + y[hd + j]);
                let n = (x[2 * hd + j] + rg * y[2 * hd + j]).tanh();
                out[r * hd + j] = (F::one() - z) * n + z * prev[r * hd + j];
            }
        }
        let ng = self.ng(&[gx, gh, h]);
        Ok(self.push(Value::new(b, hd, out), Op::GruCell { gx, gh, h }, ng))
    }

    /// Per-item weighted sum: `out[b] = sum_j w[b, j] * mem[b * L + j]`.
    pub fn attend_context(&mut self, w: NodeId, mem: NodeId) -> Result<NodeId> {
        let (b, l) = self.dims(w);
        let (mr, e) = self.dims(mem);
        if mr != b * l {
            return Err(dims_err(format!("weights {b}x{l} over memory with {mr} rows")));
        }
        let wv = &self.nodes[w.0].value.data;
        let mv = &self.nodes[mem.0].value.data;
        let mut out = vec![F::zero(); b * e];
        for i in 0..b {
            let o = &mut out[i * e..(i + 1) * e];
            for j in 0..l {
                let a = wv[i * l + j];
                if a == F::zero() {
                    continue;
                }
                let m = &mv[(i * l + j) * e..(i * l + j + 1) * e];
                for (ov, mvv) in o.iter_mut().zip(m) {
                    *ov += a * *mvv;
                }
            }
        }
        let ng = self.ng(&[w, mem]);
        Ok(self.push(Value::new(b, e, out), Op::AttendContext { w, mem }, ng))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.data.iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Value::new(1, 1, vec![s]), Op::Sum(x), ng)
    }

    /// Mean squared error over the rows flagged in `rows` (all columns).
    /// Zero when no row is flagged.
    pub fn masked_mse(&mut self, pred: NodeId, target: Vec<F>, rows: Vec<bool>) -> Result<NodeId> {
        let (r, c) = self.dims(pred);
        if target.len() != r * c || rows.len() != r {
            return Err(dims_err(format!(
                "mse target {} / mask {} for {r}x{c} prediction",
                target.len(),
                rows.len()
            )));
        }
        let pv = &self.nodes[pred.0].value.data;
        let n = rows.iter().filter(|&&m| m).count() * c;
        let mut acc = F::zero();
        for i in (0..r).filter(|&i| rows[i]) {
            for j in 0..c {
                let d = pv[i * c + j] - target[i * c + j];
                acc += d * d;
            }
        }
        let loss = if n == 0 {
            F::zero()
        } else {
            acc / F::from_usize(n).unwrap()
        };
        let ng = self.ng(&[pred]);
        Ok(self.push(Value::new(1, 1, vec![loss]), Op::MaskedMse { pred, target, rows }, ng))
    }

    /// Mean binary cross-entropy with logits over the flagged rows of an `R x 1` input.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: Vec<F>, rows: Vec<bool>) -> Result<NodeId> {
        let (r, c) = self.dims(logits);
        if c != 1 || target.len() != r || rows.len() != r {
            return Err(dims_err(format!("bce over {r}x{c} logits")));
        }
        let xv = &self.nodes[logits.0].value.data;
        let n = rows.iter().filter(|&&m| m).count();
        let mut acc = F::zero();
        for i in (0..r).filter(|&i| rows[i]) {
            let x = xv[i];
            acc += x.max(F::zero()) - x * target[i] + (F::one() + (-x.abs()).exp()).ln();
        }
        let loss = if n == 0 {
            F::zero()
        } else {
            acc / F::from_usize(n).unwrap()
        };
        let ng = self.ng(&[logits]);
        Ok(self.push(Value::new(1, 1, vec![loss]), Op::BceLogits { logits, target, rows }, ng))
    }

    /// Mean CTC negative log-likelihood over `items`, reading log-probabilities
    /// from the rows of `logp`.
    pub fn ctc(&mut self, logp: NodeId, items: Vec<CtcItem>, blank: usize) -> Result<NodeId> {
        let (r, c) = self.dims(logp);
        if items.is_empty() {
            return Err(dims_err("ctc over zero items".into()));
        }
        if blank >= c {
            return Err(dims_err(format!("blank {blank} outside {c} classes")));
        }
        let lv = &self.nodes[logp.0].value;
        let mut total = F::zero();
        for item in &items {
            if item.rows.is_empty() || item.rows.iter().any(|&x| x >= r) {
                return Err(dims_err("ctc item rows out of range".into()));
            }
            if item.labels.iter().any(|&l| l >= c || l == blank) {
                return Err(dims_err("ctc label outside the class set or equal to blank".into()));
            }
            let needed = ctc_required_frames(&item.labels);
            if needed > item.rows.len() {
                return Err(Error::InfeasibleLabel {
                    label_len: item.labels.len(),
                    needed,
                    frames: item.rows.len(),
                });
            }
            let ext = ctc_extend(&item.labels, blank);
            let lp = |t: usize, k: usize| lv.at(item.rows[t], k);
            let (_, nll) = ctc_alpha(&lp, item.rows.len(), &ext);
            total += nll;
        }
        let loss = total / F::from_usize(items.len()).unwrap();
        let ng = self.ng(&[logp]);
        Ok(self.push(Value::new(1, 1, vec![loss]), Op::Ctc { logp, items, blank }, ng))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        let lv = &self.nodes[loss.0].value;
        if lv.rows * lv.cols != 1 {
            return Err(Error::NonScalarLoss(vec![lv.rows, lv.cols]));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and accumulates gradients of every bound
    /// trainable parameter into `store`. Parameters of the store that are not
    /// reachable from `loss` end up with a zero gradient.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore<F>) -> Result<()> {
        let grads = self.backward(loss)?;
        for (_, t) in store.iter_mut() {
            if t.grad.is_none() {
                t.zero_grad();
            }
        }
        for (name, id) in &self.param_order {
            if store.is_frozen(name) {
                continue;
            }
            if let Some(g) = grads.get(*id) {
                store.add_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<F>>], id: NodeId) -> &'a mut Vec<F> {
        let n = self.nodes[id.0].value.data.len();
        grads[id.0].get_or_insert_with(|| vec![F::zero(); n])
    }

    fn acc_slice(&self, grads: &mut [Option<Vec<F>>], id: NodeId, g: impl Iterator<Item = F>) {
        if !self.wants(id) {
            return;
        }
        let b = self.buf(grads, id);
        for (a, v) in b.iter_mut().zip(g) {
            *a += v;
        }
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                if self.wants(*a) {
                    let buf = self.buf(grads, *a);
                    gemm(m, n, k, g, false, &bv.data, true, buf, true);
                }
                if self.wants(*b) {
                    let buf = self.buf(grads, *b);
                    gemm(k, m, n, &av.data, true, g, false, buf, true);
                }
            }
            Op::Add(a, b) => {
                self.acc_slice(grads, *a, g.iter().copied());
                self.acc_slice(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc_slice(grads, *a, g.iter().copied());
                self.acc_slice(grads, *b, g.iter().map(|&v| -v));
            }
            Op::Mul(a, b) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                self.acc_slice(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y));
                self.acc_slice(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y));
            }
            Op::AddBias(x, bias) => {
                self.acc_slice(grads, *x, g.iter().copied());
                if self.wants(*bias) {
                    let c = out.cols;
                    let buf = self.buf(grads, *bias);
                    for row in g.chunks(c) {
                        for (a, v) in buf.iter_mut().zip(row) {
                            *a += *v;
                        }
                    }
                }
            }
            Op::AddRepeatRows { x, y, block } => {
                self.acc_slice(grads, *x, g.iter().copied());
                if self.wants(*y) {
                    let c = out.cols;
                    let buf = self.buf(grads, *y);
                    for (i, row) in g.chunks(c).enumerate() {
                        let dst = &mut buf[(i / block) * c..(i / block + 1) * c];
                        for (a, v) in dst.iter_mut().zip(row) {
                            *a += *v;
                        }
                    }
                }
            }
            Op::Scale(x, s) => self.acc_slice(grads, *x, g.iter().map(|&v| v * *s)),
            Op::Sigmoid(x) => {
                let y = &out.data;
                self.acc_slice(
                    grads,
                    *x,
                    g.iter().zip(y).map(|(&d, &s)| d * s * (F::one() - s)),
                );
            }
            Op::Tanh(x) => {
                let y = &out.data;
                self.acc_slice(grads, *x, g.iter().zip(y).map(|(&d, &t)| d * (F::one() - t * t)));
            }
            Op::Relu(x) => {
                let y = &out.data;
                self.acc_slice(
                    grads,
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(&d, &v)| if v > F::zero() { d } else { F::zero() }),
                );
            }
            Op::SoftmaxRows(x) => {
                if self.wants(*x) {
                    let c = out.cols;
                    let y = &out.data;
                    let buf = self.buf(grads, *x);
                    for r in 0..out.rows {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            buf[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                if self.wants(*x) {
                    let c = out.cols;
                    let y = &out.data;
                    let buf = self.buf(grads, *x);
                    for r in 0..out.rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let s: F = gr.iter().copied().sum();
                        for j in 0..c {
                            buf[r * c + j] += gr[j] - y[r * c + j].exp() * s;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    if self.wants(p) {
                        let buf = self.buf(grads, p);
                        for r in 0..out.rows {
                            let src = &g[r * out.cols + off..r * out.cols + off + pc];
                            for (a, v) in buf[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                *a += *v;
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).data.len();
                    self.acc_slice(grads, p, g[off..off + n].iter().copied());
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let xc = self.value(*x).cols;
                    let len = out.cols;
                    let buf = self.buf(grads, *x);
                    for r in 0..out.rows {
                        let dst = &mut buf[r * xc + start..r * xc + start + len];
                        for (a, v) in dst.iter_mut().zip(&g[r * len..(r + 1) * len]) {
                            *a += *v;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let c = out.cols;
                    let buf = self.buf(grads, *x);
                    for (a, v) in buf[start * c..].iter_mut().zip(g) {
                        *a += *v;
                    }
                }
            }
            Op::GatherRows { x, index } => {
                if self.wants(*x) {
                    let c = out.cols;
                    let buf = self.buf(grads, *x);
                    for (i, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            for (a, v) in buf[s * c..(s + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                                *a += *v;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => self.acc_slice(grads, *x, g.iter().copied()),
            Op::Conv1d {
                x,
                w,
                layout,
                kernel,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let rows = out.rows;
                let c_out = out.cols;
                let width = wv.cols;
                if self.wants(*w) {
                    let col = im2col(xv, layout, *kernel);
                    let buf = self.buf(grads, *w);
                    gemm(c_out, rows, width, g, true, &col, false, buf, true);
                }
                if self.wants(*x) {
                    let mut dcol = vec![F::zero(); rows * width];
                    gemm(rows, c_out, width, g, false, &wv.data, false, &mut dcol, false);
                    let c_in = xv.cols;
                    let buf = self.buf(grads, *x);
                    col2im(&dcol, buf, c_in, layout, *kernel);
                }
            }
            Op::LstmCellC { gates, c } => {
                let gv = &self.value(*gates).data;
                let cv = &self.value(*c).data;
                let h = out.cols;
                let g4 = 4 * h;
                if self.wants(*gates) {
                    let buf = self.buf(grads, *gates);
                    for r in 0..out.rows {
                        let gr = &gv[r * g4..(r + 1) * g4];
                        for j in 0..h {
                            let d = g[r * h + j];
                            let i = sigmoid(gr[j]);
                            let f = sigmoid(gr[h + j]);
                            let cand = gr[2 * h + j].tanh();
                            buf[r * g4 + j] += d * cand * i * (F::one() - i);
                            buf[r * g4 + h + j] += d * cv[r * h + j] * f * (F::one() - f);
                            buf[r * g4 + 2 * h + j] += d * i * (F::one() - cand * cand);
                        }
                    }
                }
                if self.wants(*c) {
                    let buf = self.buf(grads, *c);
                    for r in 0..out.rows {
                        for j in 0..h {
                            let f = sigmoid(gv[r * g4 + h + j]);
                            buf[r * h + j] += g[r * h + j] * f;
                        }
                    }
                }
            }
            Op::LstmCellH { gates, c_new } => {
                let gv = &self.value(*gates).data;
                let cv = &self.value(*c_new).data;
                let h = out.cols;
                let g4 = 4 * h;
                if self.wants(*gates) {
                    let buf = self.buf(grads, *gates);
                    for r in 0..out.rows {
                        for j in 0..h {
                            let o = sigmoid(gv[r * g4 + 3 * h + j]);
                            let tc = cv[r * h + j].tanh();
                            buf[r * g4 + 3 * h + j] += g[r * h + j] * tc * o * (F::one() - o);
                        }
                    }
                }
                if self.wants(*c_new) {
                    let buf = self.buf(grads, *c_new);
                    for r in 0..out.rows {
                        for j in 0..h {
                            let o = sigmoid(gv[r * g4 + 3 * h + j]);
                            let tc = cv[r * h + j].tanh();
                            buf[r * h + j] += g[r * h + j] * o * (F::one() - tc * tc);
                        }
                    }
                }
            }
            Op::GruCell { gx, gh, h } => {
                let xv = &self.value(*gx).data;
                let yv = &self.value(*gh).data;
                let pv = &self.value(*h).data;
                let hd = out.cols;
                let g3 = 3 * hd;
                let mut dgx = vec![F::zero(); out.rows * g3];
                let mut dgh = vec![F::zero(); out.rows * g3];
                let mut dh = vec![F::zero(); out.rows * hd];
                for r in 0..out.rows {
                    let x = &xv[r * g3..(r + 1) * g3];
                    let y = &yv[r * g3..(r + 1) * g3];
                    for j in 0..hd {
                        let d = g[r * hd + j];
                        let rg = sigmoid(x[j] + y[j]);
                        let z = sigmoid(x[hd + j] + y[hd + j]);
                        let n = (x[2 * hd + j] + rg * y[2 * hd + j]).tanh();
                        let prev = pv[r * hd + j];
                        let dn = d * (F::one() - z) * (F::one() - n * n);
                        let dz = d * (prev - n) * z * (F::one() - z);
                        let dr = dn * y[2 * hd + j] * rg * (F::one() - rg);
                        dgx[r * g3 + j] = dr;
                        dgh[r * g3 + j] = dr;
                        dgx[r * g3 + hd + j] = dz;
                        dgh[r * g3 + hd + j] = dz;
                        dgx[r * g3 + 2 * hd + j] = dn;
                        dgh[r * g3 + 2 * hd + j] = dn * rg;
                        dh[r * hd + j] = d * z;
                    }
                }
                self.acc_slice(grads, *gx, dgx.into_iter());
                self.acc_slice(grads, *gh, dgh.into_iter());
                self.acc_slice(grads, *h, dh.into_iter());
            }
            Op::AttendContext { w, mem } => {
                let wv = self.value(*w);
                let mv = &self.value(*mem).data;
                let (b, l) = (wv.rows, wv.cols);
                let e = out.cols;
                if self.wants(*w) {
                    let buf = self.buf(grads, *w);
                    for i in 0..b {
                        let gi = &g[i * e..(i + 1) * e];
                        for j in 0..l {
                            let m = &mv[(i * l + j) * e..(i * l + j + 1) * e];
                            buf[i * l + j] += gi.iter().zip(m).map(|(&a, &c)| a * c).sum();
                        }
                    }
                }
                if self.wants(*mem) {
                    let buf = self.buf(grads, *mem);
                    for i in 0..b {
                        let gi = &g[i * e..(i + 1) * e];
                        for j in 0..l {
                            let a = wv.data[i * l + j];
                            let dst = &mut buf[(i * l + j) * e..(i * l + j + 1) * e];
                            for (d, v) in dst.iter_mut().zip(gi) {
                                *d += a * *v;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).data.len();
                self.acc_slice(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::MaskedMse { pred, target, rows } => {
                if self.wants(*pred) {
                    let pv = self.value(*pred);
                    let c = pv.cols;
                    let n = rows.iter().filter(|&&m| m).count() * c;
                    if n > 0 {
                        let s = g[0] * F::from_f64_lossy(2.0) / F::from_usize(n).unwrap();
                        let buf = self.buf(grads, *pred);
                        for i in (0..pv.rows).filter(|&i| rows[i]) {
                            for j in 0..c {
                                buf[i * c + j] += s * (pv.data[i * c + j] - target[i * c + j]);
                            }
                        }
                    }
                }
            }
            Op::BceLogits {
                logits,
                target,
                rows,
            } => {
                if self.wants(*logits) {
                    let xv = &self.value(*logits).data;
                    let n = rows.iter().filter(|&&m| m).count();
                    if n > 0 {
                        let s = g[0] / F::from_usize(n).unwrap();
                        let buf = self.buf(grads, *logits);
                        for i in (0..xv.len()).filter(|&i| rows[i]) {
                            buf[i] += s * (sigmoid(xv[i]) - target[i]);
                        }
                    }
                }
            }
            Op::Ctc { logp, items, blank } => {
                if self.wants(*logp) {
                    let lv = self.value(*logp);
                    let c = lv.cols;
                    let scale = g[0] / F::from_usize(items.len()).unwrap();
                    let buf = self.buf(grads, *logp);
                    for item in items {
                        let ext = ctc_extend(&item.labels, *blank);
                        let lp = |t: usize, k: usize| lv.at(item.rows[t], k);
                        let t_len = item.rows.len();
                        let (alpha, nll) = ctc_alpha(&lp, t_len, &ext);
                        let beta = ctc_beta(&lp, t_len, &ext);
                        let s_len = ext.len();
                        for t in 0..t_len {
                            let row = item.rows[t];
                            for s in 0..s_len {
                                let a = alpha[t * s_len + s];
                                let b = beta[t * s_len + s];
                                if a == F::neg_infinity() || b == F::neg_infinity() {
                                    continue;
                                }
                                let k = ext[s];
                                let occ = (a + b - lp(t, k) + nll).exp();
                                buf[row * c + k] -= scale * occ;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Negative log-likelihood of `labels` under per-frame log-probabilities
/// `log_probs` (`T x C`, row-major), computed with the forward algorithm.
pub fn ctc_nll<F: Real>(log_probs: &[F], classes: usize, labels: &[usize], blank: usize) -> Result<F> {
    if classes == 0 || log_probs.len() % classes != 0 || log_probs.is_empty() {
        return Err(dims_err("log-prob matrix is empty or ragged".into()));
    }
    let frames = log_probs.len() / classes;
    let needed = ctc_required_frames(labels);
    if needed > frames {
        return Err(Error::InfeasibleLabel {
            label_len: labels.len(),
            needed,
            frames,
        });
    }
    if labels.iter().any(|&l| l >= classes || l == blank) {
        return Err(dims_err("label outside the class set or equal to blank".into()));
    }
    let ext = ctc_extend(labels, blank);
    let lp = |t: usize, k: usize| log_probs[t * classes + k];
    Ok(ctc_alpha(&lp, frames, &ext).1)
}

impl<F: Real> Graph<F> {
    /// Copies a node's value out as a tensor of shape `[rows, cols]`.
    pub fn tensor(&self, id: NodeId) -> Tensor<F> {
        let v = self.value(id);
        Tensor::new(vec![v.rows, v.cols], v.data.clone()).expect("value extents are consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loss_has_unit_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.input(1, 1, vec![3.0]).unwrap();
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.input(1, 2, vec![1.0, 2.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn conv_identity_and_box_filter() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(5, 1, vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let id = g.constant(1, 1, vec![1.0]).unwrap();
        let y = g.conv1d(x, id, 1, SeqLayout::single(5)).unwrap();
        assert_eq!(g.value(y).data, g.value(x).data);
        let boxk = g.constant(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let y = g.conv1d(x, boxk, 3, SeqLayout::single(5)).unwrap();
        assert_eq!(g.value(y).data, vec![0.0, 1.0, 1.0, 1.0, 0.0]);
        assert!(matches!(
            g.conv1d(x, boxk, 2, SeqLayout::single(5)),
            Err(Error::EvenKernel(2))
        ));
    }

    #[test]
    fn conv_respects_item_lengths() {
        // Two items, time-major, second item only two steps long.
        let layout = SeqLayout {
            steps: 3,
            batch: 2,
            time_major: true,
            lengths: Some(vec![3, 2]),
        };
        let mut g = Graph::<f64>::new();
        let x = g.constant(6, 1, vec![1.0, 10.0, 2.0, 20.0, 3.0, 99.0]).unwrap();
        let k = g.constant(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let y = g.conv1d(x, k, 3, layout).unwrap();
        assert_eq!(g.value(y).data, vec![3.0, 30.0, 6.0, 30.0, 5.0, 0.0]);
    }

    #[test]
    fn masked_softmax_zeroes_padding() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(2, 3, vec![1.0, 2.0, 3.0, 0.5, 0.5, 7.0]).unwrap();
        let y = g.softmax_rows(x, Some(&[3, 2])).unwrap();
        let v = g.value(y);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn ctc_two_frame_uniform() {
        let lp = vec![0.5f64.ln(); 4];
        let nll = ctc_nll(&lp, 2, &[1], 0).unwrap();
        assert!((nll - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((nll - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn ctc_certain_single_frame() {
        let lp = vec![f64::NEG_INFINITY, 0.0];
        assert_eq!(ctc_nll(&lp, 2, &[1], 0).unwrap(), 0.0);
    }

    #[test]
    fn ctc_infeasible_label() {
        let lp = vec![0.5f64.ln(); 4];
        assert!(matches!(
            ctc_nll(&lp, 2, &[1, 1], 0),
            Err(Error::InfeasibleLabel { needed: 3, .. })
        ));
    }
}
