//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Tensors are dense row-major f64 buffers with explicit shapes. Every
//! operation is recorded as a node on a [`Tape`]; [`Tape::backward`] walks the
//! recording in reverse and accumulates gradients into fresh buffers, so a
//! tape can be differentiated repeatedly without cross-call state.
//!
//! There is no broadcasting beyond scalar-times-tensor. Model wiring that
//! needs a row repeated (bias terms, shared sequence vectors) builds the
//! expansion explicitly with `matmul` against a ones column, which keeps
//! every shape on the tape auditable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense row-major tensor. Rank 0 (empty shape) is a scalar with one element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TapeError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TapeError::BadBuffer { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    /// Builds a (rows, cols) matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TapeError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TapeError::BadBuffer { shape: vec![r, c], len: row.len() });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn row(values: Vec<f64>) -> Self {
        let c = values.len();
        Tensor { shape: vec![1, c], data: values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar in the loose sense: exactly one element, any rank.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape { op: &'static str, expected: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} does not describe a buffer of length {len}")]
    BadBuffer { shape: Vec<usize>, len: usize },
    #[error("{op}: negative input {value} is outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable {index} is not on this tape")]
    ForeignVar { index: usize },
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleConst(Var, f64),
    /// scalar variable times tensor; the scalar receives a gradient
    ScaleVar { scalar: Var, tensor: Var },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    MeanRows(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Log(Var),
    Dot(Var, Var),
    Sqrt(Var),
    Recip { input: Var, floor: f64 },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list. Ops append nodes; backward walks them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Zero-filled for any
    /// requires-grad tensor the loss does not reach; None for constants.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const LOG_CLAMP: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(), TapeError> {
        if v.0 >= self.nodes.len() {
            return Err(TapeError::ForeignVar { index: v.0 });
        }
        Ok(())
    }

    fn needs_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.needs_grad(inputs);
        self.push(value, op, rg)
    }

    // ── forward primitives ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        Ok(self.record(Tensor { shape: vec![m, n], data: out }, Op::Matmul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        if !ta.is_matrix() {
            return Err(TapeError::BadShape {
                op: "transpose",
                expected: "matrix",
                shape: ta.shape.clone(),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let out = transpose_raw(&ta.data, r, c);
        Ok(self.record(Tensor { shape: vec![c, r], data: out }, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(TapeError::ShapeMismatch {
                op: name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        Ok(self.record(Tensor { shape, data }, op, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TapeError> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| c * x).collect(),
        };
        Ok(self.record(out, Op::ScaleConst(a, c), &[a]))
    }

    /// Scalar variable times tensor; gradient flows into both.
    pub fn scale_by(&mut self, scalar: Var, tensor: Var) -> Result<Var, TapeError> {
        self.check(scalar)?;
        self.check(tensor)?;
        let ts = &self.nodes[scalar.0].value;
        if !ts.is_scalar() {
            return Err(TapeError::BadShape {
                op: "scale_by",
                expected: "scalar",
                shape: ts.shape.clone(),
            });
        }
        let s = ts.data[0];
        let tt = &self.nodes[tensor.0].value;
        let out = Tensor {
            shape: tt.shape.clone(),
            data: tt.data.iter().map(|&x| s * x).collect(),
        };
        Ok(self.record(out, Op::ScaleVar { scalar, tensor }, &[scalar, tensor]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.is_matrix() || !tb.is_matrix() || ta.rows() != tb.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "concat_cols",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (r, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&ta.data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data[i * cb..(i + 1) * cb]);
        }
        Ok(self.record(
            Tensor { shape: vec![r, ca + cb], data },
            Op::ConcatCols(a, b),
            &[a, b],
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "concat_rows",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let c = ta.cols();
        let r = ta.rows() + tb.rows();
        let mut data = Vec::with_capacity(r * c);
        data.extend_from_slice(&ta.data);
        data.extend_from_slice(&tb.data);
        Ok(self.record(Tensor { shape: vec![r, c], data }, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Column means of a matrix, kept as a single-row matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        if !ta.is_matrix() || ta.rows() == 0 {
            return Err(TapeError::BadShape {
                op: "mean_rows",
                expected: "matrix with at least one row",
                shape: ta.shape.clone(),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += ta.data[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        Ok(self.record(Tensor { shape: vec![1, c], data: out }, Op::MeanRows(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| stable_sigmoid(x)).collect(),
        };
        Ok(self.record(out, Op::Sigmoid(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        Ok(self.record(out, Op::Relu(a), &[a]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        if !ta.is_matrix() || ta.cols() == 0 {
            return Err(TapeError::BadShape {
                op: "softmax_rows",
                expected: "matrix with at least one column",
                shape: ta.shape.clone(),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                data[i * c + j] /= z;
            }
        }
        Ok(self.record(Tensor { shape: vec![r, c], data }, Op::SoftmaxRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        Ok(self.record(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Natural log. Inputs below 1e-12 clamp there so saturated
    /// probabilities stay differentiable; negative inputs are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(ta.data.len());
        for &x in &ta.data {
            if x < 0.0 {
                return Err(TapeError::Domain { op: "log", value: x });
            }
            data.push(x.max(LOG_CLAMP).ln());
        }
        let shape = ta.shape.clone();
        Ok(self.record(Tensor { shape, data }, Op::Log(a), &[a]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(TapeError::ShapeMismatch {
                op: "dot",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let s: f64 = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).sum();
        Ok(self.record(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Elementwise square root; negative inputs are a domain error and the
    /// gradient at zero is guarded.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(ta.data.len());
        for &x in &ta.data {
            if x < 0.0 {
                return Err(TapeError::Domain { op: "sqrt", value: x });
            }
            data.push(x.sqrt());
        }
        let shape = ta.shape.clone();
        Ok(self.record(Tensor { shape, data }, Op::Sqrt(a), &[a]))
    }

    /// Elementwise 1/max(x, floor). Inputs at or below the floor sit in the
    /// clamped region and receive zero gradient.
    pub fn recip(&mut self, a: Var, floor: f64) -> Result<Var, TapeError> {
        assert!(floor > 0.0, "recip floor must be positive");
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| 1.0 / x.max(floor)).collect(),
        };
        Ok(self.record(out, Op::Recip { input: a, floor }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TapeError> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let expect: usize = shape.iter().product();
        if expect != ta.data.len() {
            return Err(TapeError::BadShape {
                op: "reshape",
                expected: "shape with matching element count",
                shape,
            });
        }
        let data = ta.data.clone();
        Ok(self.record(Tensor { shape, data }, Op::Reshape(a), &[a]))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates d loss / d node for every node, reverse topological
    /// order by construction. Fresh buffers per call.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        self.check(loss)?;
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(TapeError::NonScalarLoss { shape: lt.shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if !node.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.data.len()]);
                Some(Tensor { shape: node.value.shape.clone(), data })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.data.len()]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(&tb.data, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(grads, a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(&ta.data, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(grads, b, &db);
                }
            }
            Op::Transpose(a) => {
                let (c, r) = (node.value.rows(), node.value.cols());
                let da = transpose_raw(g, c, r);
                self.accumulate(grads, a, &da);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g);
                self.accumulate(grads, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g);
                let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                self.accumulate(grads, b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = g.iter().zip(&tb.data).map(|(&gi, &y)| gi * y).collect();
                    self.accumulate(grads, a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = g.iter().zip(&ta.data).map(|(&gi, &x)| gi * x).collect();
                    self.accumulate(grads, b, &db);
                }
            }
            Op::ScaleConst(a, c) => {
                let da: Vec<f64> = g.iter().map(|&gi| c * gi).collect();
                self.accumulate(grads, a, &da);
            }
            Op::ScaleVar { scalar, tensor } => {
                let s = self.nodes[scalar.0].value.data[0];
                let tt = &self.nodes[tensor.0].value;
                if self.nodes[scalar.0].requires_grad {
                    let ds: f64 = g.iter().zip(&tt.data).map(|(&gi, &x)| gi * x).sum();
                    self.accumulate(grads, scalar, &[ds]);
                }
                if self.nodes[tensor.0].requires_grad {
                    let dt: Vec<f64> = g.iter().map(|&gi| s * gi).collect();
                    self.accumulate(grads, tensor, &dt);
                }
            }
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (r, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
                let mut da = vec![0.0; r * ca];
                let mut db = vec![0.0; r * cb];
                for i in 0..r {
                    let row = &g[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da[i * ca..(i + 1) * ca].copy_from_slice(&row[..ca]);
                    db[i * cb..(i + 1) * cb].copy_from_slice(&row[ca..]);
                }
                self.accumulate(grads, a, &da);
                self.accumulate(grads, b, &db);
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.data.len();
                self.accumulate(grads, a, &g[..na]);
                self.accumulate(grads, b, &g[na..]);
            }
            Op::MeanRows(a) => {
                let ta = &self.nodes[a.0].value;
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j] / r as f64;
                    }
                }
                self.accumulate(grads, a, &da);
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                let da: Vec<f64> = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (1.0 - yi)).collect();
                self.accumulate(grads, a, &da);
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value.data;
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value.data;
                let (r, c) = (node.value.rows(), node.value.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let inner: f64 = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, a, &da);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.data.len();
                let da = vec![g[0]; n];
                self.accumulate(grads, a, &da);
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value.data;
                let da: Vec<f64> = g.iter().zip(x).map(|(&gi, &xi)| gi / xi.max(LOG_CLAMP)).collect();
                self.accumulate(grads, a, &da);
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = tb.data.iter().map(|&y| g[0] * y).collect();
                    self.accumulate(grads, a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = ta.data.iter().map(|&x| g[0] * x).collect();
                    self.accumulate(grads, b, &db);
                }
            }
            Op::Sqrt(a) => {
                let y = &node.value.data;
                let da: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi / (2.0 * yi.max(LOG_CLAMP)))
                    .collect();
                self.accumulate(grads, a, &da);
            }
            Op::Recip { input, floor } => {
                let x = &self.nodes[input.0].value.data;
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > floor { -gi / (xi * xi) } else { 0.0 })
                    .collect();
                self.accumulate(grads, input, &da);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, a, g);
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences. Returns the max over coordinates of
/// |analytic - numeric| / max(1, |analytic|).
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TapeError>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let loss = f(&mut tape, v)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(v).expect("param gradient").data().to_vec();

    let eval = |t: &Tensor| -> Result<f64, TapeError> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let loss = f(&mut tape, v)?;
        Ok(tape.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let hi = eval(&probe)?;
        probe.data[i] = orig - step;
        let lo = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (hi - lo) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
