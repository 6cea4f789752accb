//! Small dense reverse-mode kernel.
//!
//! Everything is a row-major [`Tensor2D`] of `f64`. A [`Tape`] records the
//! forward pass as a list of nodes; [`Tape::backward`] walks it in reverse,
//! keeping input gradients on the tape and accumulating parameter gradients
//! into the [`ParamStore`].
//!
//! Parameters are referenced by [`ParamId`] and read from the store during
//! the forward pass, so large weight arrays are never copied onto the tape.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("backward called before any forward op was recorded")]
    EmptyTape,
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("backward needs a 1x1 output or an explicit seed, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> NumericsError {
    NumericsError::Shape {
        op,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Tensor2D::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite("Tensor2D::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Result<Self, NumericsError> {
        let cols = data.len();
        Self::new(1, cols, data)
    }

    pub fn column(data: Vec<f64>) -> Result<Self, NumericsError> {
        let rows = data.len();
        Self::new(rows, 1, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column_values(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn add_assign(&mut self, other: &Tensor2D) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = beta * c + a(m x k) * b(k x n)`, each operand optionally transposed.
///
/// `a` and `b` are given in their stored row-major layout; transposition
/// only changes the strides handed to the GEMM kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these dense strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Named parameters with matching gradient buffers, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: IndexMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let expected: usize = shape.iter().product();
        if expected != value.len() {
            return Err(shape_err(
                "ParamStore::add",
                format!("`{name}` has shape {shape:?} but {} values", value.len()),
            ));
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite("ParamStore::add"));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name,
            shape,
            value,
            grad,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NumericsError> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|x| x.is_finite()))
    }

    fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Gather {
        table: ParamId,
        ids: Vec<usize>,
    },
    ScaleShift {
        weight: Var,
        bias: Var,
        scale: f64,
    },
    ConcatCols(Vec<Var>),
    BroadcastConcat {
        rows: Var,
        tail: Vec<Var>,
    },
    Conv1d {
        input: Var,
        kernel: ParamId,
        bias: ParamId,
        k: usize,
    },
    Conv1dBroadcast {
        input: Var,
        cond: Var,
        kernel: ParamId,
        bias: ParamId,
        k: usize,
    },
    Linear {
        input: Var,
        weight: ParamId,
        bias: ParamId,
    },
    Relu(Var),
    SumAll(Var),
    Loss {
        input: Var,
        grad: Tensor2D,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor2D,
}

/// Records a forward pass for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor2D>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor2D> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Tensor2D) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor2D, NumericsError> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(NumericsError::UnknownVar(v.0))
    }

    pub fn input(&mut self, t: Tensor2D) -> Var {
        self.push(Op::Input, t)
    }

    /// Copies a parameter onto the tape as a `rows x cols` leaf.
    ///
    /// Intended for small parameters (embedding vectors); large weights are
    /// consumed by id in the layer ops instead.
    pub fn param(
        &mut self,
        store: &ParamStore,
        id: ParamId,
        rows: usize,
        cols: usize,
    ) -> Result<Var, NumericsError> {
        let value = Tensor2D::new(rows, cols, store.value(id).to_vec())?;
        Ok(self.push(Op::Param(id), value))
    }

    /// Row lookup: output row `u` is `table[ids[u]]`. `table` has shape `[V, E]`.
    pub fn gather(
        &mut self,
        store: &ParamStore,
        table: ParamId,
        ids: &[usize],
    ) -> Result<Var, NumericsError> {
        let shape = store.shape(table);
        if shape.len() != 2 {
            return Err(shape_err("gather", format!("table shape {shape:?}")));
        }
        let (vocab, width) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(shape_err("gather", format!("id {bad} >= vocabulary {vocab}")));
        }
        let values = store.value(table);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&values[i * width..(i + 1) * width]);
        }
        let t = Tensor2D {
            rows: ids.len(),
            cols: width,
            data,
        };
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            t,
        ))
    }

    /// `scale * weight + bias` for a fixed scalar, elementwise over equal shapes.
    pub fn scale_shift(&mut self, weight: Var, bias: Var, scale: f64) -> Result<Var, NumericsError> {
        let w = self.check(weight)?;
        let b = self.check(bias)?;
        if w.shape() != b.shape() {
            return Err(shape_err(
                "scale_shift",
                format!("{:?} vs {:?}", w.shape(), b.shape()),
            ));
        }
        let data = w.data.iter().zip(&b.data).map(|(w, b)| scale * w + b).collect();
        let t = Tensor2D {
            rows: w.rows,
            cols: w.cols,
            data,
        };
        if !scale.is_finite() {
            return Err(NumericsError::NonFinite("scale_shift"));
        }
        Ok(self.push(Op::ScaleShift { weight, bias, scale }, t))
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let rows = self.check(*first)?.rows;
        let mut cols = 0;
        for &p in parts {
            let t = self.check(p)?;
            if t.rows != rows {
                return Err(shape_err("concat_cols", format!("rows {} vs {rows}", t.rows)));
            }
            cols += t.cols;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor2D { rows, cols, data }))
    }

    /// Appends the same single-row vectors to every row of `rows`.
    pub fn broadcast_concat(&mut self, rows: Var, tail: &[Var]) -> Result<Var, NumericsError> {
        let base = self.check(rows)?.clone();
        let mut tail_row = Vec::new();
        for &t in tail {
            let v = self.check(t)?;
            if v.rows != 1 {
                return Err(shape_err(
                    "broadcast_concat",
                    format!("broadcast operand has {} rows", v.rows),
                ));
            }
            tail_row.extend_from_slice(&v.data);
        }
        let cols = base.cols + tail_row.len();
        let mut data = Vec::with_capacity(base.rows * cols);
        for r in 0..base.rows {
            data.extend_from_slice(base.row(r));
            data.extend_from_slice(&tail_row);
        }
        Ok(self.push(
            Op::BroadcastConcat {
                rows,
                tail: tail.to_vec(),
            },
            Tensor2D {
                rows: base.rows,
                cols,
                data,
            },
        ))
    }

    /// Same-length 1-D convolution along rows with zero padding.
    ///
    /// `kernel` has shape `[K, Cin, Cout]`, `bias` has shape `[Cout]`, and
    /// `out[u][co] = bias[co] + sum_{k,ci} input[u + k - K/2][ci] * kernel[k][ci][co]`.
    pub fn conv1d(
        &mut self,
        store: &ParamStore,
        input: Var,
        kernel: ParamId,
        bias: ParamId,
    ) -> Result<Var, NumericsError> {
        let x = self.check(input)?;
        let (k, cin, cout) = conv_shape(store, kernel, bias, "conv1d")?;
        if cin != x.cols {
            return Err(shape_err("conv1d", format!("input has {} channels, kernel expects {cin}", x.cols)));
        }
        let mut out = bias_rows(x.rows, store.value(bias));
        conv_accumulate(x, store.value(kernel), k, cin, cout, 0, &mut out);
        Ok(self.push(
            Op::Conv1d {
                input,
                kernel,
                bias,
                k,
            },
            out,
        ))
    }

    /// `conv1d(broadcast_concat(input, [cond]))` without materializing the
    /// broadcast columns. `kernel` is `[K, E + C, Cout]` with the `E` input
    /// channels first.
    pub fn conv1d_broadcast(
        &mut self,
        store: &ParamStore,
        input: Var,
        cond: Var,
        kernel: ParamId,
        bias: ParamId,
    ) -> Result<Var, NumericsError> {
        let x = self.check(input)?;
        let c = self.check(cond)?;
        if c.rows != 1 {
            return Err(shape_err("conv1d_broadcast", "condition must be a single row"));
        }
        let (k, cin, cout) = conv_shape(store, kernel, bias, "conv1d_broadcast")?;
        if cin != x.cols + c.cols {
            return Err(shape_err(
                "conv1d_broadcast",
                format!("{} + {} channels, kernel expects {cin}", x.cols, c.cols),
            ));
        }
        let w = store.value(kernel);
        let mut out = bias_rows(x.rows, store.value(bias));
        conv_accumulate(x, w, k, cin, cout, 0, &mut out);
        let projected = project_condition(c, w, k, x.cols, cin, cout);
        let half = (k / 2) as isize;
        let u_len = x.rows as isize;
        for u in 0..x.rows {
            let row = &mut out.data[u * cout..(u + 1) * cout];
            for (kk, q) in projected.iter().enumerate() {
                let src = u as isize + kk as isize - half;
                if src >= 0 && src < u_len {
                    row.iter_mut().zip(q).for_each(|(o, q)| *o += q);
                }
            }
        }
        Ok(self.push(
            Op::Conv1dBroadcast {
                input,
                cond,
                kernel,
                bias,
                k,
            },
            out,
        ))
    }

    /// Per-row affine map. `weight` is `[Cin, Cout]`, `bias` is `[Cout]`.
    pub fn linear(
        &mut self,
        store: &ParamStore,
        input: Var,
        weight: ParamId,
        bias: ParamId,
    ) -> Result<Var, NumericsError> {
        let x = self.check(input)?;
        let ws = store.shape(weight);
        if ws.len() != 2 || ws[0] != x.cols || store.shape(bias) != [ws[1]] {
            return Err(shape_err(
                "linear",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    x.shape(),
                    ws,
                    store.shape(bias)
                ),
            ));
        }
        let (cin, cout) = (ws[0], ws[1]);
        let mut out = bias_rows(x.rows, store.value(bias));
        gemm(x.rows, cin, cout, &x.data, false, store.value(weight), false, 1.0, &mut out.data);
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            out,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, NumericsError> {
        let x = self.check(input)?;
        let t = Tensor2D {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        Ok(self.push(Op::Relu(input), t))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, NumericsError> {
        let s = self.check(input)?.sum();
        Ok(self.push(Op::SumAll(input), Tensor2D::new(1, 1, vec![s])?))
    }

    /// Scalar node with an externally computed value and gradient with
    /// respect to `input`. Losses are evaluated outside the tape and plugged
    /// in here.
    pub fn loss(&mut self, input: Var, value: f64, grad: Tensor2D) -> Result<Var, NumericsError> {
        let x = self.check(input)?;
        if x.shape() != grad.shape() {
            return Err(shape_err(
                "loss",
                format!("gradient {:?} vs input {:?}", grad.shape(), x.shape()),
            ));
        }
        if !value.is_finite() {
            return Err(NumericsError::NonFinite("loss"));
        }
        Ok(self.push(Op::Loss { input, grad }, Tensor2D::new(1, 1, vec![value])?))
    }

    /// Back-propagates from a 1x1 output with unit seed.
    pub fn backward(&mut self, output: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        let out = self.check_for_backward(output)?;
        if out.shape() != (1, 1) {
            return Err(NumericsError::NotScalar {
                rows: out.rows,
                cols: out.cols,
            });
        }
        self.backward_with(output, Tensor2D::new(1, 1, vec![1.0])?, store)
    }

    /// Back-propagates an arbitrary upstream gradient from `output`.
    pub fn backward_with(
        &mut self,
        output: Var,
        seed: Tensor2D,
        store: &mut ParamStore,
    ) -> Result<(), NumericsError> {
        let out = self.check_for_backward(output)?;
        if out.shape() != seed.shape() {
            return Err(shape_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), out.shape()),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, store);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn check_for_backward(&self, output: Var) -> Result<&Tensor2D, NumericsError> {
        if self.nodes.is_empty() {
            return Err(NumericsError::EmptyTape);
        }
        self.check(output)
    }

    fn accumulate(&mut self, v: Var, g: Tensor2D) {
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor2D, store: &mut ParamStore) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Input => {}
            Op::Param(id) => {
                store
                    .grad_mut(id)
                    .iter_mut()
                    .zip(&g.data)
                    .for_each(|(a, b)| *a += b);
            }
            Op::Gather { table, ids } => {
                let width = g.cols;
                let grad = store.grad_mut(table);
                for (u, &id) in ids.iter().enumerate() {
                    let dst = &mut grad[id * width..(id + 1) * width];
                    dst.iter_mut().zip(g.row(u)).for_each(|(a, b)| *a += b);
                }
            }
            Op::ScaleShift { weight, bias, scale } => {
                let mut gw = g.clone();
                gw.data.iter_mut().for_each(|x| *x *= scale);
                self.accumulate(weight, gw);
                self.accumulate(bias, g.clone());
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.nodes[p.0].value.cols;
                    let mut part = Tensor2D::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        part.data[r * cols..(r + 1) * cols]
                            .copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    self.accumulate(p, part);
                }
            }
            Op::BroadcastConcat { rows, tail } => {
                let base_cols = self.nodes[rows.0].value.cols;
                let mut gb = Tensor2D::zeros(g.rows, base_cols);
                for r in 0..g.rows {
                    gb.data[r * base_cols..(r + 1) * base_cols]
                        .copy_from_slice(&g.row(r)[..base_cols]);
                }
                self.accumulate(rows, gb);
                let mut offset = base_cols;
                for t in tail {
                    let cols = self.nodes[t.0].value.cols;
                    let mut gt = Tensor2D::zeros(1, cols);
                    for r in 0..g.rows {
                        let src = &g.row(r)[offset..offset + cols];
                        gt.data.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                    offset += cols;
                    self.accumulate(t, gt);
                }
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                k,
            } => {
                let x = self.nodes[input.0].value.clone();
                let (cin, cout) = (x.cols, g.cols);
                add_column_sums(store.grad_mut(bias), g);
                let gx = conv_backward(&x, g, store, kernel, k, cin, cout, 0);
                self.accumulate(input, gx);
            }
            Op::Conv1dBroadcast {
                input,
                cond,
                kernel,
                bias,
                k,
            } => {
                let x = self.nodes[input.0].value.clone();
                let c = self.nodes[cond.0].value.clone();
                let cout = g.cols;
                let cin = x.cols + c.cols;
                add_column_sums(store.grad_mut(bias), g);
                let gx = conv_backward(&x, g, store, kernel, k, cin, cout, 0);
                self.accumulate(input, gx);

                // Positions where tap k reads a real row see the condition.
                let half = (k / 2) as isize;
                let u_len = g.rows as isize;
                let mut tap_sums = vec![vec![0.0; cout]; k];
                for (kk, sums) in tap_sums.iter_mut().enumerate() {
                    for u in 0..g.rows {
                        let src = u as isize + kk as isize - half;
                        if src >= 0 && src < u_len {
                            sums.iter_mut().zip(g.row(u)).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                let e = x.cols;
                let mut gc = Tensor2D::zeros(1, c.cols);
                {
                    let w = store.value(kernel);
                    for (kk, sums) in tap_sums.iter().enumerate() {
                        let slice = &w[(kk * cin + e) * cout..(kk + 1) * cin * cout];
                        gemm(1, cout, c.cols, sums, false, slice, true, 1.0, &mut gc.data);
                    }
                }
                let gw = store.grad_mut(kernel);
                for (kk, sums) in tap_sums.iter().enumerate() {
                    let slice = &mut gw[(kk * cin + e) * cout..(kk + 1) * cin * cout];
                    gemm(c.cols, 1, cout, &c.data, true, sums, false, 1.0, slice);
                }
                self.accumulate(cond, gc);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.nodes[input.0].value.clone();
                let (cin, cout) = (x.cols, g.cols);
                add_column_sums(store.grad_mut(bias), g);
                let mut gx = Tensor2D::zeros(x.rows, cin);
                gemm(x.rows, cout, cin, &g.data, false, store.value(weight), true, 0.0, &mut gx.data);
                gemm(cin, x.rows, cout, &x.data, true, &g.data, false, 1.0, store.grad_mut(weight));
                self.accumulate(input, gx);
            }
            Op::Relu(input) => {
                let x = &self.nodes[input.0].value;
                let data = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                let gx = Tensor2D {
                    rows: x.rows,
                    cols: x.cols,
                    data,
                };
                self.accumulate(input, gx);
            }
            Op::SumAll(input) => {
                let x = &self.nodes[input.0].value;
                let s = g.data[0];
                let gx = Tensor2D {
                    rows: x.rows,
                    cols: x.cols,
                    data: vec![s; x.data.len()],
                };
                self.accumulate(input, gx);
            }
            Op::Loss { input, grad } => {
                let s = g.data[0];
                let mut gx = grad;
                gx.data.iter_mut().for_each(|x| *x *= s);
                self.accumulate(input, gx);
            }
        }
    }
}

fn conv_shape(
    store: &ParamStore,
    kernel: ParamId,
    bias: ParamId,
    op: &'static str,
) -> Result<(usize, usize, usize), NumericsError> {
    let ks = store.shape(kernel);
    if ks.len() != 3 {
        return Err(shape_err(op, format!("kernel shape {ks:?}")));
    }
    let (k, cin, cout) = (ks[0], ks[1], ks[2]);
    if k % 2 == 0 {
        return Err(NumericsError::EvenKernel(k));
    }
    if store.shape(bias) != [cout] {
        return Err(shape_err(op, format!("bias shape {:?}, expected [{cout}]", store.shape(bias))));
    }
    Ok((k, cin, cout))
}

fn bias_rows(rows: usize, bias: &[f64]) -> Tensor2D {
    let cols = bias.len();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        data.extend_from_slice(bias);
    }
    Tensor2D { rows, cols, data }
}

/// Valid output row range `[lo, hi)` for tap `kk`, i.e. rows whose source
/// `u + kk - K/2` lies inside `[0, rows)`.
fn tap_range(rows: usize, kk: usize, k: usize) -> (usize, usize, isize) {
    let shift = kk as isize - (k / 2) as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (rows as isize - shift).min(rows as isize).max(0) as usize;
    (lo, hi.max(lo), shift)
}

/// Adds the contribution of the first `x.cols` input channels of each tap.
fn conv_accumulate(
    x: &Tensor2D,
    w: &[f64],
    k: usize,
    cin: usize,
    cout: usize,
    channel_offset: usize,
    out: &mut Tensor2D,
) {
    let e = x.cols;
    for kk in 0..k {
        let (lo, hi, shift) = tap_range(x.rows, kk, k);
        if hi <= lo {
            continue;
        }
        let src_lo = (lo as isize + shift) as usize;
        let slice = &w[(kk * cin + channel_offset) * cout..(kk * cin + channel_offset + e) * cout];
        gemm(
            hi - lo,
            e,
            cout,
            &x.data[src_lo * e..],
            false,
            slice,
            false,
            1.0,
            &mut out.data[lo * cout..hi * cout],
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor2D,
    g: &Tensor2D,
    store: &mut ParamStore,
    kernel: ParamId,
    k: usize,
    cin: usize,
    cout: usize,
    channel_offset: usize,
) -> Tensor2D {
    let e = x.cols;
    let mut gx = Tensor2D::zeros(x.rows, e);
    for kk in 0..k {
        let (lo, hi, shift) = tap_range(x.rows, kk, k);
        if hi <= lo {
            continue;
        }
        let src_lo = (lo as isize + shift) as usize;
        let src_hi = (hi as isize + shift) as usize;
        let range = (kk * cin + channel_offset) * cout..(kk * cin + channel_offset + e) * cout;
        gemm(
            hi - lo,
            cout,
            e,
            &g.data[lo * cout..hi * cout],
            false,
            &store.value(kernel)[range.clone()],
            true,
            1.0,
            &mut gx.data[src_lo * e..src_hi * e],
        );
        gemm(
            e,
            hi - lo,
            cout,
            &x.data[src_lo * e..src_hi * e],
            true,
            &g.data[lo * cout..hi * cout],
            false,
            1.0,
            &mut store.grad_mut(kernel)[range],
        );
    }
    gx
}

/// `cond · kernel[k][E..E+C]` for every tap.
fn project_condition(
    c: &Tensor2D,
    w: &[f64],
    k: usize,
    e: usize,
    cin: usize,
    cout: usize,
) -> Vec<Vec<f64>> {
    (0..k)
        .map(|kk| {
            let mut q = vec![0.0; cout];
            let slice = &w[(kk * cin + e) * cout..(kk + 1) * cin * cout];
            gemm(1, c.cols, cout, &c.data, false, slice, false, 0.0, &mut q);
            q
        })
        .collect()
}

fn add_column_sums(dst: &mut [f64], g: &Tensor2D) {
    for r in 0..g.rows {
        dst.iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
    }
}

/// Plain functional forms of the layer ops, used for inference paths and tests.
pub fn conv1d_forward(
    input: &Tensor2D,
    kernel: &[f64],
    kernel_size: usize,
    bias: &[f64],
) -> Result<Tensor2D, NumericsError> {
    let mut store = ParamStore::new();
    let cout = bias.len();
    if kernel_size == 0 || kernel.len() != kernel_size * input.cols * cout {
        return Err(shape_err(
            "conv1d_forward",
            format!("kernel has {} values for K={kernel_size}, Cin={}, Cout={cout}", kernel.len(), input.cols),
        ));
    }
    let k = store.add("k", vec![kernel_size, input.cols, cout], kernel.to_vec())?;
    let b = store.add("b", vec![cout], bias.to_vec())?;
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let y = tape.conv1d(&store, x, k, b)?;
    Ok(tape.value(y).clone())
}

pub fn linear_forward(
    input: &Tensor2D,
    weight: &[f64],
    bias: &[f64],
) -> Result<Tensor2D, NumericsError> {
    let cout = bias.len();
    if weight.len() != input.cols * cout {
        return Err(shape_err(
            "linear_forward",
            format!("weight has {} values for {}x{cout}", weight.len(), input.cols),
        ));
    }
    let mut out = bias_rows(input.rows, bias);
    gemm(input.rows, input.cols, cout, &input.data, false, weight, false, 1.0, &mut out.data);
    Ok(out)
}

pub fn relu(input: &Tensor2D) -> Tensor2D {
    Tensor2D {
        rows: input.rows,
        cols: input.cols,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub const DEFAULT_GRADCHECK_EPSILON: f64 = 1e-4;

/// Compares tape gradients against central differences.
///
/// `loss_fn` records a forward pass on a fresh tape and returns a 1x1
/// output. Returns the max over all parameter entries of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradcheck<F>(store: &mut ParamStore, epsilon: f64, mut loss_fn: F) -> Result<f64, NumericsError>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, NumericsError>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(NumericsError::InvalidEpsilon(epsilon));
    }
    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss_fn(store, &mut tape)?;
    if !tape.value(out).data[0].is_finite() {
        return Err(NumericsError::NonFinite("gradcheck loss"));
    }
    tape.backward(out, store)?;

    let mut eval = |store: &ParamStore| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let out = loss_fn(store, &mut tape)?;
        let v = tape.value(out).data[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericsError::NonFinite("gradcheck loss"))
        }
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        for j in 0..store.value(id).len() {
            let original = store.value(id)[j];
            store.value_mut(id)[j] = original + epsilon;
            let plus = eval(store)?;
            store.value_mut(id)[j] = original - epsilon;
            let minus = eval(store)?;
            store.value_mut(id)[j] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = store.grad(id)[j];
            let denom = 1f64.max(analytic.abs()).max(numeric.abs());
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // Triple loop straight from the definition.
    fn conv_oracle(x: &Tensor2D, w: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
        let (u_len, cin, cout) = (x.rows(), x.cols(), b.len());
        let mut out = vec![0.0; u_len * cout];
        for u in 0..u_len {
            for co in 0..cout {
                let mut acc = b[co];
                for kk in 0..k {
                    let src = u as isize + kk as isize - (k / 2) as isize;
                    if src < 0 || src >= u_len as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        acc += x.get(src as usize, ci) * w[(kk * cin + ci) * cout + co];
                    }
                }
                out[u * cout + co] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor2D::new(3, 2, vec![1.0, -2.0, 3.0, 0.5, 4.0, 7.0]).unwrap();
        let mut w = vec![0.0; 3 * 2 * 2];
        w[(2) * 2] = 1.0; // tap 1, ci 0, co 0
        w[(2 + 1) * 2 + 1] = 1.0; // tap 1, ci 1, co 1
        let y = conv1d_forward(&x, &w, 3, &[0.0, 0.0]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_hand_case() {
        let x = Tensor2D::column(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv1d_forward(&x, &[1.0, 1.0, 1.0], 3, &[0.0]).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let x = Tensor2D::zeros(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_vec(&mut rng, 3 * 3 * 2);
        let y = conv1d_forward(&x, &w, 3, &[0.25, -1.5]).unwrap();
        for r in 0..5 {
            assert_eq!(y.row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(u, cin, cout, k) in &[(1, 2, 3, 3), (2, 3, 1, 5), (7, 4, 5, 3), (6, 2, 2, 1)] {
            let x = Tensor2D::new(u, cin, random_vec(&mut rng, u * cin)).unwrap();
            let w = random_vec(&mut rng, k * cin * cout);
            let b = random_vec(&mut rng, cout);
            let y = conv1d_forward(&x, &w, k, &b).unwrap();
            for (a, e) in y.data().iter().zip(conv_oracle(&x, &w, k, &b)) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor2D::zeros(3, 2);
        assert!(conv1d_forward(&x, &[0.0; 5], 3, &[0.0]).is_err());
        let mut store = ParamStore::new();
        let k = store.add("k", vec![2, 2, 1], vec![0.0; 4]).unwrap();
        let b = store.add("b", vec![1], vec![0.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.input(x);
        assert_eq!(tape.conv1d(&store, v, k, b), Err(NumericsError::EvenKernel(2)));
    }

    #[test]
    fn linear_examples() {
        let x = Tensor2D::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = linear_forward(&x, Tensor2D::identity(3).data(), &[0.0; 3]).unwrap();
        assert_eq!(y, x);
        let s = linear_forward(&Tensor2D::column(vec![3.0]).unwrap(), &[2.0], &[1.0]).unwrap();
        assert_eq!(s.data(), &[7.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor2D::new(5, 4, random_vec(&mut rng, 20)).unwrap();
        let w = random_vec(&mut rng, 8);
        let b = random_vec(&mut rng, 2);
        let y = linear_forward(&x, &w, &b).unwrap();
        for r in 0..5 {
            for c in 0..2 {
                let dot: f64 = (0..4).map(|i| x.get(r, i) * w[i * 2 + c]).sum::<f64>() + b[c];
                assert!((y.get(r, c) - dot).abs() < 1e-12);
            }
        }
        assert!(linear_forward(&x, &w[..6], &b).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor2D::row_vector(vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor2D::row_vector(vec![0.0, 1.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = Tensor2D::new(4, 4, random_vec(&mut rng, 16)).unwrap();
        for (a, b) in relu(&r).data().iter().zip(r.data()) {
            assert_eq!(*a, if *b > 0.0 { *b } else { 0.0 });
        }
    }

    #[test]
    fn linear_weight_grad_is_column_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor2D::new(4, 3, random_vec(&mut rng, 12)).unwrap();
        let mut store = ParamStore::new();
        let w = store.add("w", vec![3, 2], random_vec(&mut rng, 6)).unwrap();
        let b = store.add("b", vec![2], vec![0.0; 2]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = tape.linear(&store, xv, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s, &mut store).unwrap();
        for i in 0..3 {
            let col_sum: f64 = x.column_values(i).iter().sum();
            assert!((store.grad(w)[i * 2] - col_sum).abs() < 1e-12);
            assert!((store.grad(w)[i * 2 + 1] - col_sum).abs() < 1e-12);
        }
        assert_eq!(store.grad(b), &[4.0, 4.0]);

        // a second pass without zeroing accumulates
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let y = tape.linear(&store, xv, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(b), &[8.0, 8.0]);
    }

    #[test]
    fn zero_seed_gives_zero_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = store.add("b", vec![2], vec![0.5, 0.5]).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor2D::new(3, 2, vec![1.0; 6]).unwrap());
        let y = tape.linear(&store, x, w, b).unwrap();
        tape.backward_with(y, Tensor2D::zeros(3, 2), &mut store).unwrap();
        assert!(store.iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn backward_before_forward() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        assert_eq!(tape.backward(Var(0), &mut store), Err(NumericsError::EmptyTape));
        let v = tape.input(Tensor2D::zeros(2, 2));
        assert!(matches!(
            tape.backward(v, &mut store),
            Err(NumericsError::NotScalar { .. })
        ));
        assert_eq!(tape.backward(Var(9), &mut store), Err(NumericsError::UnknownVar(9)));
    }

    #[test]
    fn param_store_rules() {
        let mut store = ParamStore::new();
        store.add("a", vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(
            store.add("a", vec![1], vec![0.0]),
            Err(NumericsError::DuplicateParam("a".into()))
        );
        assert!(store.add("b", vec![3], vec![0.0]).is_err());
        assert!(store.add("c", vec![1], vec![f64::NAN]).is_err());
        assert!(store.id("zzz").is_err());
        assert_eq!(store.get(store.id("a").unwrap()).grad.len(), 2);
    }

    #[test]
    fn gradcheck_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor2D::new(3, 4, random_vec(&mut rng, 12)).unwrap();
        let mut store = ParamStore::new();
        let w = store.add("w", vec![4, 2], random_vec(&mut rng, 8)).unwrap();
        let b = store.add("b", vec![2], random_vec(&mut rng, 2)).unwrap();
        let err = gradcheck(&mut store, 1e-4, |s, t| {
            let xv = t.input(x.clone());
            let y = t.linear(s, xv, w, b)?;
            t.sum(y)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gradcheck_conv_relu_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor2D::new(5, 3, random_vec(&mut rng, 15)).unwrap();
        let mut store = ParamStore::new();
        let k = store.add("k", vec![3, 3, 4], random_vec(&mut rng, 36)).unwrap();
        let kb = store.add("kb", vec![4], random_vec(&mut rng, 4)).unwrap();
        let w = store.add("w", vec![4, 1], random_vec(&mut rng, 4)).unwrap();
        let b = store.add("b", vec![1], vec![0.1]).unwrap();
        let f = |s: &ParamStore, t: &mut Tape| {
            let xv = t.input(x.clone());
            let h = t.conv1d(s, xv, k, kb)?;
            let h = t.relu(h)?;
            let y = t.linear(s, h, w, b)?;
            let sq: f64 = t.value(y).data().iter().map(|v| v * v).sum();
            let grad = Tensor2D::new(5, 1, t.value(y).data().iter().map(|v| 2.0 * v).collect())?;
            t.loss(y, sq, grad)
        };
        let err = gradcheck(&mut store, 1e-5, f).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradcheck_rejects_bad_epsilon() {
        let mut store = ParamStore::new();
        for eps in [0.0, -1e-3, f64::NAN] {
            let r = gradcheck(&mut store, eps, |_, t| {
                let v = t.input(Tensor2D::zeros(1, 1));
                Ok(v)
            });
            assert!(matches!(r, Err(NumericsError::InvalidEpsilon(_))));
        }
    }

    #[test]
    fn fused_broadcast_conv_matches_explicit_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (u, e, c, h) = (6, 3, 4, 5);
        let mut store = ParamStore::new();
        let k = store.add("k", vec![3, e + c, h], random_vec(&mut rng, 3 * (e + c) * h)).unwrap();
        let kb = store.add("kb", vec![h], random_vec(&mut rng, h)).unwrap();
        let x = Tensor2D::new(u, e, random_vec(&mut rng, u * e)).unwrap();
        let cond = Tensor2D::row_vector(random_vec(&mut rng, c)).unwrap();
        let seed = Tensor2D::new(u, h, random_vec(&mut rng, u * h)).unwrap();

        let mut fused_store = store.clone();
        let mut t1 = Tape::new();
        let xv = t1.input(x.clone());
        let cv = t1.input(cond.clone());
        let y1 = t1.conv1d_broadcast(&fused_store, xv, cv, k, kb).unwrap();
        t1.backward_with(y1, seed.clone(), &mut fused_store).unwrap();

        let mut t2 = Tape::new();
        let xv2 = t2.input(x);
        let cv2 = t2.input(cond);
        let cat = t2.broadcast_concat(xv2, &[cv2]).unwrap();
        let y2 = t2.conv1d(&store, cat, k, kb).unwrap();
        t2.backward_with(y2, seed, &mut store).unwrap();

        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(a, b)| (a - b).abs() < 1e-12);
        assert!(close(t1.value(y1).data(), t2.value(y2).data()));
        assert!(close(t1.grad(xv).unwrap().data(), t2.grad(xv2).unwrap().data()));
        assert!(close(t1.grad(cv).unwrap().data(), t2.grad(cv2).unwrap().data()));
        assert!(close(fused_store.grad(k), store.grad(k)));
        assert!(close(fused_store.grad(kb), store.grad(kb)));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor2D::new(8, 6, random_vec(&mut rng, 48)).unwrap();
        let w = random_vec(&mut rng, 3 * 6 * 6);
        let b = random_vec(&mut rng, 6);
        let a = conv1d_forward(&x, &w, 3, &b).unwrap();
        let c = conv1d_forward(&x, &w, 3, &b).unwrap();
        assert_eq!(a.data(), c.data());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2D> {
            prop::collection::vec(-3.0f64..3.0, rows * cols)
                .prop_map(move |d| Tensor2D::new(rows, cols, d).unwrap())
        }

        proptest! {
            #[test]
            fn conv_and_linear_are_linear_in_input(
                (a, b, w, lw) in (1usize..8, 1usize..5, 1usize..5).prop_flat_map(|(u, cin, cout)| (
                    tensor(u, cin),
                    tensor(u, cin),
                    prop::collection::vec(-1.0f64..1.0, 3 * cin * cout),
                    prop::collection::vec(-1.0f64..1.0, cin * cout),
                )),
                alpha in -2.0f64..2.0,
            ) {
                let cout = lw.len() / a.cols();
                let zero = vec![0.0; cout];
                let sum = Tensor2D::new(a.rows(), a.cols(),
                    a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + y).collect()).unwrap();
                for (f, g) in [
                    (conv1d_forward(&sum, &w, 3, &zero).unwrap(),
                     (conv1d_forward(&a, &w, 3, &zero).unwrap(), conv1d_forward(&b, &w, 3, &zero).unwrap())),
                    (linear_forward(&sum, &lw, &zero).unwrap(),
                     (linear_forward(&a, &lw, &zero).unwrap(), linear_forward(&b, &lw, &zero).unwrap())),
                ] {
                    for ((s, x), y) in f.data().iter().zip(g.0.data()).zip(g.1.data()) {
                        prop_assert!((s - (alpha * x + y)).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
