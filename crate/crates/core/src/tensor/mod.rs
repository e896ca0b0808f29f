//! Dense tensors and a reverse-mode gradient tape.
//!
//! The carrier type is [`Tensor`]: a row-major `f64` buffer with a shape,
//! rank 1 or 2 in practice (a scalar is shape `[1]`). Differentiable
//! computations are recorded on a [`Tape`]: every op appends a node holding
//! its result, so node order is a topological order of the graph and
//! [`Tape::backward`] is a single reverse sweep. A tape supports exactly one
//! backward pass; build a fresh tape per training step.
//!
//! Convention choices that matter for gradients: `relu` and `abs` use
//! subgradient 0 at the origin, and `l2_normalize` maps a vector with norm
//! below [`NORM_EPS`] to the zero vector (the row is reported as degenerate
//! and its gradient is zero).

pub mod kernels;

use crate::error::{Error, Result};

/// Norm guard for `l2_normalize`: rows at or below this norm are treated as
/// degenerate and map to zero.
pub const NORM_EPS: f64 = 1e-12;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Marks a leaf whose gradient should be accumulated by `backward`.
    pub requires_grad: bool,
    /// Filled by `backward`; same length as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("vector: nonempty data")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Shape("from_rows: no rows".into()));
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("from_rows: ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::matrix(r, c, data)
    }

    /// Marks this tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    /// Row count; rank-1 tensors count as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Width of a row.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("nonempty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBias { a: TensorId, bias: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: f64 },
    Relu { a: TensorId },
    Abs { a: TensorId },
    LogSoftmax { a: TensorId },
    L2NormalizeRows { a: TensorId, norms: Vec<f64> },
    Sum { a: TensorId },
    SelectPerRow { a: TensorId, idx: Vec<usize> },
    GatherRows { a: TensorId, idx: Vec<usize> },
    RowsDot { a: TensorId, b: TensorId },
    PairwiseDistance { a: TensorId, b: TensorId },
    Recip { a: TensorId, eps: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    tensor: Tensor,
    /// Row indices that hit the degenerate-norm fallback (normalize only).
    degenerate: Vec<usize>,
}

/// Recorded computation graph with one-shot reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, mut tensor: Tensor, requires_grad: bool) -> TensorId {
        tensor.requires_grad = requires_grad;
        debug_assert!(
            tensor.is_finite(),
            "non-finite forward value out of {op:?}"
        );
        self.nodes.push(Node {
            op,
            tensor,
            degenerate: Vec::new(),
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    /// Inserts `tensor` as a leaf. Its `requires_grad` flag decides whether
    /// `backward` accumulates a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let rg = tensor.requires_grad;
        self.push(Op::Leaf, tensor, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> TensorId {
        tensor.requires_grad = false;
        self.push(Op::Leaf, tensor, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data[0]
    }

    /// Gradient accumulated at `id`, if backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Rows that collapsed to zero in an `l2_normalize` node.
    pub fn degenerate_rows(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].degenerate
    }

    fn dims2(&self, id: TensorId) -> (usize, usize) {
        let t = &self.nodes[id.0].tensor;
        (t.rows(), t.cols())
    }

    /// Matrix product `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dims disagree ({m}x{k} vs {k2}x{n})"
            )));
        }
        let data = kernels::matmul_nn(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul { a, b }, Tensor::matrix(m, n, data)?, rg))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.dims2(a);
        let data = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.requires(a);
        let t = Tensor::matrix(c, r, data).expect("transpose shape");
        self.push(Op::Transpose { a }, t, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, data)?, rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub { a, b }, Tensor::new(shape, data)?, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(shape, data)?, rg))
    }

    fn zip_elementwise(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Adds a length-`c` bias vector to every row of `a[n,c]`.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, c) = self.dims2(a);
        let bt = self.value(bias);
        if bt.numel() != c {
            return Err(Error::Shape(format!(
                "add_bias: bias length {} vs row width {c}",
                bt.numel()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let bias_data = self.value(bias).data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(&bias_data) {
                *x += b;
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        Ok(self.push(Op::AddBias { a, bias }, Tensor::matrix(n, c, data)?, rg))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a);
        let t = Tensor::new(shape, data).expect("scale shape");
        self.push(Op::Scale { a, factor }, t, rg)
    }

    /// Elementwise max(0, x); subgradient at 0 is 0.
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a);
        let t = Tensor::new(shape, data).expect("relu shape");
        self.push(Op::Relu { a }, t, rg)
    }

    /// Elementwise |x|; subgradient at 0 is 0.
    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.abs()).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a);
        let t = Tensor::new(shape, data).expect("abs shape");
        self.push(Op::Abs { a }, t, rg)
    }

    /// Row-wise log-softmax of `a[n,c]`, stabilized by max subtraction.
    pub fn log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, c) = self.dims2(a);
        if c < 2 {
            return Err(Error::Shape(format!(
                "log_softmax: needs at least 2 classes per row, got {c}"
            )));
        }
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Op::LogSoftmax { a }, Tensor::matrix(n, c, data)?, rg))
    }

    /// Normalizes each row of `a` to unit euclidean norm. Rows with norm at
    /// or below [`NORM_EPS`] become zero rows and are reported by
    /// [`Tape::degenerate_rows`]. The gradient includes the projection term
    /// of the quotient rule and is zero for degenerate rows.
    pub fn l2_normalize(&mut self, a: TensorId) -> TensorId {
        let (n, c) = self.dims2(a);
        let mut data = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(n);
        let mut degenerate = Vec::new();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(norm);
            if norm <= NORM_EPS {
                degenerate.push(i);
                row.fill(0.0);
            } else {
                for x in row.iter_mut() {
                    *x /= norm;
                }
            }
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a);
        let t = Tensor::new(shape, data).expect("normalize shape");
        let id = self.push(Op::L2NormalizeRows { a, norms }, t, rg);
        self.nodes[id.0].degenerate = degenerate;
        id
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Op::Sum { a }, Tensor::scalar(s), rg)
    }

    /// Arithmetic mean over all elements (sum followed by scale).
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Picks `a[i, idx[i]]` for every row, yielding a length-n vector.
    pub fn select_per_row(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (n, c) = self.dims2(a);
        if idx.len() != n {
            return Err(Error::Shape(format!(
                "select_per_row: {} indices for {n} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Data(format!(
                "select_per_row: index {bad} out of range for width {c}"
            )));
        }
        let src = self.value(a);
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| src.at(i, j)).collect();
        let rg = self.requires(a);
        Ok(self.push(
            Op::SelectPerRow { a, idx: idx.to_vec() },
            Tensor::vector(data),
            rg,
        ))
    }

    /// Stacks rows `a[idx[0]], a[idx[1]], ...` into a new matrix. Gradient
    /// accumulates into repeated source rows.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (r, c) = self.dims2(a);
        if let Some(&bad) = idx.iter().find(|&&j| j >= r) {
            return Err(Error::Data(format!(
                "gather_rows: row {bad} out of range for {r} rows"
            )));
        }
        if idx.is_empty() {
            return Err(Error::Shape("gather_rows: empty index list".into()));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &j in idx {
            data.extend_from_slice(src.row(j));
        }
        let rg = self.requires(a);
        Ok(self.push(
            Op::GatherRows { a, idx: idx.to_vec() },
            Tensor::matrix(idx.len(), c, data)?,
            rg,
        ))
    }

    /// Per-row dot products of two equally shaped matrices, yielding [n].
    pub fn rows_dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise(a, b, "rows_dot")?;
        let (n, c) = self.dims2(a);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..c {
                    s += av[i * c + j] * bv[i * c + j];
                }
                s
            })
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::RowsDot { a, b }, Tensor::vector(data), rg))
    }

    /// Euclidean distance between every row of `a[m,d]` and every row of
    /// `b[c,d]`, yielding [m,c]. Subgradient at coincident points is 0.
    pub fn pairwise_distance(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, d) = self.dims2(a);
        let (c, d2) = self.dims2(b);
        if d != d2 {
            return Err(Error::Shape(format!(
                "pairwise_distance: widths {d} and {d2} differ"
            )));
        }
        let data = kernels::pairwise_distance(
            self.value(a).data(),
            self.value(b).data(),
            m,
            c,
            d,
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Op::PairwiseDistance { a, b },
            Tensor::matrix(m, c, data)?,
            rg,
        ))
    }

    /// Elementwise 1 / (x + eps).
    pub fn recip(&mut self, a: TensorId, eps: f64) -> TensorId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| 1.0 / (x + eps)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a);
        let t = Tensor::new(shape, data).expect("recip shape");
        self.push(Op::Recip { a, eps }, t, rg)
    }

    /// Reverse sweep from a scalar loss. Fills `grad` on every node that
    /// requires one. Errors on a non-scalar loss and on a second call.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; record a fresh graph".into(),
            ));
        }
        self.backward_done = true;
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape()
            )));
        }
        if !self.nodes[loss.0].tensor.requires_grad {
            // Loss does not depend on any differentiable leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].tensor.grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(TensorId(i), &op, &g);
            self.nodes[i].tensor.grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: Vec<f64>) {
        let node = &mut self.nodes[id.0];
        if !node.tensor.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), node.tensor.numel());
        match &mut node.tensor.grad {
            Some(grad) => {
                for (g, d) in grad.iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            None => node.tensor.grad = Some(delta),
        }
    }

    fn propagate(&mut self, out: TensorId, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if self.requires(*a) {
                    // dA = G * B^T
                    let da = kernels::matmul_nt(g, self.value(*b).data(), m, n, k);
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    // dB = A^T * G
                    let db = kernels::matmul_tn(self.value(*a).data(), g, m, k, n);
                    self.accumulate(*b, db);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = self.dims2(*a);
                self.accumulate(*a, kernels::transpose(g, c, r));
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::AddBias { a, bias } => {
                self.accumulate(*a, g.to_vec());
                if self.requires(*bias) {
                    let c = self.value(*bias).numel();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(*bias, db);
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let da = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    let db = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accumulate(*b, db);
                }
            }
            Op::Scale { a, factor } => {
                self.accumulate(*a, g.iter().map(|x| x * factor).collect());
            }
            Op::Relu { a } => {
                let da = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(*a, da);
            }
            Op::Abs { a } => {
                let da = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| {
                        if x > 0.0 {
                            *gv
                        } else if x < 0.0 {
                            -*gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(*a, da);
            }
            Op::LogSoftmax { a } => {
                // dx = g - softmax(x) * rowsum(g), softmax derived from the output.
                let c = self.value(out).cols();
                let out_data = self.value(out).data();
                let mut da = vec![0.0; g.len()];
                for (i, row) in g.chunks(c).enumerate() {
                    let gsum: f64 = row.iter().sum();
                    for j in 0..c {
                        let sm = out_data[i * c + j].exp();
                        da[i * c + j] = row[j] - sm * gsum;
                    }
                }
                self.accumulate(*a, da);
            }
            Op::L2NormalizeRows { a, norms } => {
                // For a row with unit output u and input norm r:
                // dv = (g - (g . u) u) / r. Degenerate rows pass no gradient.
                let c = self.value(out).cols();
                let out_data = self.value(out).data();
                let mut da = vec![0.0; g.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    if norm <= NORM_EPS {
                        continue;
                    }
                    let u = &out_data[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let gu: f64 = grow.iter().zip(u).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        da[i * c + j] = (grow[j] - gu * u[j]) / norm;
                    }
                }
                self.accumulate(*a, da);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                self.accumulate(*a, vec![g[0]; n]);
            }
            Op::SelectPerRow { a, idx } => {
                let c = self.value(*a).cols();
                let mut da = vec![0.0; self.value(*a).numel()];
                for (i, &j) in idx.iter().enumerate() {
                    da[i * c + j] += g[i];
                }
                self.accumulate(*a, da);
            }
            Op::GatherRows { a, idx } => {
                let c = self.value(*a).cols();
                let mut da = vec![0.0; self.value(*a).numel()];
                for (i, &j) in idx.iter().enumerate() {
                    for t in 0..c {
                        da[j * c + t] += g[i * c + t];
                    }
                }
                self.accumulate(*a, da);
            }
            Op::RowsDot { a, b } => {
                let (n, c) = self.dims2(*a);
                if self.requires(*a) {
                    let bv = self.value(*b).data();
                    let mut da = vec![0.0; n * c];
                    for i in 0..n {
                        for j in 0..c {
                            da[i * c + j] = g[i] * bv[i * c + j];
                        }
                    }
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    let av = self.value(*a).data();
                    let mut db = vec![0.0; n * c];
                    for i in 0..n {
                        for j in 0..c {
                            db[i * c + j] = g[i] * av[i * c + j];
                        }
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::PairwiseDistance { a, b } => {
                let (m, d) = self.dims2(*a);
                let c = self.dims2(*b).0;
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let dist = self.value(out).data().to_vec();
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; c * d];
                for i in 0..m {
                    for j in 0..c {
                        let dij = dist[i * c + j];
                        if dij == 0.0 {
                            continue;
                        }
                        let coef = g[i * c + j] / dij;
                        for t in 0..d {
                            let diff = av[i * d + t] - bv[j * d + t];
                            da[i * d + t] += coef * diff;
                            db[j * d + t] -= coef * diff;
                        }
                    }
                }
                if self.requires(*a) {
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    self.accumulate(*b, db);
                }
            }
            Op::Recip { a, eps } => {
                let da = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| {
                        let denom = x + eps;
                        -gv / (denom * denom)
                    })
                    .collect();
                self.accumulate(*a, da);
            }
        }
    }
}

#[cfg(test)]
mod tests;
