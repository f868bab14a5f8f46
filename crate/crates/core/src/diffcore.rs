//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation executed on it. Operands are referred
//! to by [`Var`] handles, which index into the tape, so the recorded order is
//! always topological. [`Tape::backward`] walks the record once in reverse and
//! accumulates adjoints into the leaf tensors.

use thiserror::Error;

/// Floor applied to the argument of [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Floor on sigmoid outputs. It only has to keep Sinkhorn inputs strictly
/// positive; anything larger would flatten very negative logits to one value
/// and cut their gradient.
pub const SIGMOID_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} holds {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("concat_cols needs at least one part")]
    EmptyConcat,
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Dense row-major tensor with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(DiffError::BadLength {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            values.extend_from_slice(r.as_ref());
        }
        Self {
            shape: vec![rows.len(), cols],
            values,
            grad: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            values: vec![0.0; rows * cols],
            grad: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            values: vec![value; rows * cols],
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            values,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => self.values.len(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.values[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn transposed(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Self::from_fn(c, r, |i, j| self.values[j * c + i])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a tensor recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    RowSoftmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    ConcatCols(Vec<Var>),
    RowNormalize(Var, Vec<f64>),
    ColNormalize(Var, Vec<f64>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations, rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok((t.shape[0], t.shape[1]))
    } else {
        Err(DiffError::NotMatrix {
            op,
            shape: t.shape.clone(),
        })
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn sigmoid_scalar(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.max(SIGMOID_FLOOR)
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

    /// Records a trainable leaf; its gradient is accumulated by `backward`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Accumulated gradient of a trainable leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Clears every accumulated gradient on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, values: Vec<f64>, op: Op) -> Var {
        let shape = self.nodes[a.0].tensor.shape.clone();
        let rg = self.needs(&[a]);
        self.push(
            Tensor {
                shape,
                values,
                grad: None,
            },
            op,
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].tensor;
        let tb = &self.nodes[b.0].tensor;
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let values = matmul_raw(&ta.values, &tb.values, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, values)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape != tb.shape {
            return Err(DiffError::ShapeMismatch {
                op,
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let values = self.nodes[a.0]
            .tensor
            .values
            .iter()
            .zip(&self.nodes[b.0].tensor.values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].tensor.shape.clone();
        let rg = self.needs(&[a, b]);
        self.push(
            Tensor {
                shape,
                values,
                grad: None,
            },
            op,
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a `1×n` row vector to every row of an `m×n` matrix.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].tensor;
        let tr = &self.nodes[row.0].tensor;
        let (m, n) = matrix_dims("add_row_broadcast", ta)?;
        if tr.values.len() != n || tr.rows() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "add_row_broadcast",
                left: ta.shape.clone(),
                right: tr.shape.clone(),
            });
        }
        let mut values = ta.values.clone();
        for i in 0..m {
            for (v, &r) in values[i * n..(i + 1) * n].iter_mut().zip(&tr.values) {
                *v += r;
            }
        }
        let rg = self.needs(&[a, row]);
        Ok(self.push(
            Tensor::matrix(m, n, values)?,
            Op::AddRowBroadcast(a, row),
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let values = self.nodes[a.0]
            .tensor
            .values
            .iter()
            .map(|x| x * k)
            .collect();
        self.unary(a, values, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let values = self.nodes[a.0]
            .tensor
            .values
            .iter()
            .map(|x| x + c)
            .collect();
        self.unary(a, values, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].tensor;
        matrix_dims("transpose", ta)?;
        let t = ta.transposed();
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    /// Softmax along each row, with per-row max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].tensor;
        let (m, n) = matrix_dims("row_softmax", ta)?;
        let mut values = ta.values.clone();
        for i in 0..m {
            let row = &mut values[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.unary(a, values, Op::RowSoftmax(a)))
    }

    /// Logistic sigmoid; outputs are floored at [`SIGMOID_FLOOR`] so they
    /// stay strictly positive.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0]
            .tensor
            .values
            .iter()
            .map(|&z| sigmoid_scalar(z))
            .collect();
        self.unary(a, values, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0]
            .tensor
            .values
            .iter()
            .map(|&z| z.max(0.0))
            .collect();
        self.unary(a, values, Op::Relu(a))
    }

    /// Natural log of `max(x, LOG_FLOOR)`. The gradient is zero where the
    /// floor is active.
    pub fn log(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0]
            .tensor
            .values
            .iter()
            .map(|&x| x.max(LOG_FLOOR).ln())
            .collect();
        self.unary(a, values, Op::Log(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(DiffError::EmptyConcat)?;
        let (m, _) = matrix_dims("concat_cols", &self.nodes[first.0].tensor)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].tensor;
            let (r, c) = matrix_dims("concat_cols", t)?;
            if r != m {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[first.0].tensor.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                values.extend_from_slice(&self.nodes[p.0].tensor.values[i * w..(i + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::matrix(m, total, values)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Divides each row by its sum. Entries must be positive.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].tensor;
        let (m, n) = matrix_dims("row_normalize", ta)?;
        let mut values = ta.values.clone();
        let mut sums = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut values[i * n..(i + 1) * n];
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
            sums.push(s);
        }
        Ok(self.unary(a, values, Op::RowNormalize(a, sums)))
    }

    /// Divides each column by its sum. Entries must be positive.
    pub fn col_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].tensor;
        let (m, n) = matrix_dims("col_normalize", ta)?;
        let mut sums = vec![0.0; n];
        for i in 0..m {
            for (s, v) in sums.iter_mut().zip(&ta.values[i * n..(i + 1) * n]) {
                *s += v;
            }
        }
        let mut values = ta.values.clone();
        for i in 0..m {
            for (v, s) in values[i * n..(i + 1) * n].iter_mut().zip(&sums) {
                *v /= s;
            }
        }
        Ok(self.unary(a, values, Op::ColNormalize(a, sums)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].tensor.values.iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Accumulates `dLoss/dLeaf` into every trainable leaf reachable from
    /// `loss`. Calling it twice without [`Tape::zero_grad`] doubles the
    /// stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].tensor;
        if lt.values.len() != 1 {
            return Err(DiffError::NonScalarLoss(lt.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let t = &mut self.nodes[idx].tensor;
                match &mut t.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => t.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.tensor;
        let val = |v: &Var| &self.nodes[v.0].tensor;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Vec<f64>| match &mut adj[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if wants(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &tb.values[p * n..(p + 1) * n];
                            da[i * k + p] = gi.iter().zip(bp).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, da);
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.values[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += aip * gv;
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    send(*a, g.to_vec());
                }
                if wants(b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    send(*a, g.to_vec());
                }
                if wants(b) {
                    send(*b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if wants(a) {
                    send(*a, g.iter().zip(&tb.values).map(|(x, y)| x * y).collect());
                }
                if wants(b) {
                    send(*b, g.iter().zip(&ta.values).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRowBroadcast(a, row) => {
                if wants(a) {
                    send(*a, g.to_vec());
                }
                if wants(row) {
                    let n = out.shape[1];
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        dr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    send(*row, dr);
                }
            }
            Op::Scale(a, k) => send(*a, g.iter().map(|x| x * k).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Transpose(a) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                send(*a, d);
            }
            Op::RowSoftmax(a) => {
                let n = out.shape[1];
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in
                    d.chunks_mut(n).zip(g.chunks(n)).zip(out.values.chunks(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - dot);
                    }
                }
                send(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(&out.values)
                    .map(|(gv, &s)| {
                        if s <= SIGMOID_FLOOR {
                            0.0
                        } else {
                            gv * s * (1.0 - s)
                        }
                    })
                    .collect();
                send(*a, d);
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(&val(a).values)
                    .map(|(gv, &z)| if z > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(*a, d);
            }
            Op::Log(a) => {
                let d = g
                    .iter()
                    .zip(&val(a).values)
                    .map(|(gv, &x)| if x > LOG_FLOOR { gv / x } else { 0.0 })
                    .collect();
                send(*a, d);
            }
            Op::ConcatCols(parts) => {
                let m = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = val(p).shape[1];
                    if wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        send(*p, d);
                    }
                    offset += w;
                }
            }
            Op::RowNormalize(a, sums) => {
                let n = out.shape[1];
                let mut d = vec![0.0; g.len()];
                for (i, s) in sums.iter().enumerate() {
                    let grow = &g[i * n..(i + 1) * n];
                    let yrow = &out.values[i * n..(i + 1) * n];
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        d[i * n + j] = (grow[j] - dot) / s;
                    }
                }
                send(*a, d);
            }
            Op::ColNormalize(a, sums) => {
                let (m, n) = (out.shape[0], out.shape[1]);
                let mut dots = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dots[j] += g[i * n + j] * out.values[i * n + j];
                    }
                }
                let mut d = vec![0.0; g.len()];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = (g[i * n + j] - dots[j]) / sums[j];
                    }
                }
                send(*a, d);
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(a).values.len()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `f` (which builds its scalar output on a fresh
    /// tape from the given inputs) compared to recorded adjoints.
    fn check_grads(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o).item()
        };
        let h = 1e-5;
        for (k, v) in vars.iter().enumerate() {
            let analytic = tape
                .grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or(vec![0.0; inputs[k].len()]);
            for e in 0..inputs[k].len() {
                let mut plus = inputs.to_vec();
                plus[k].values_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[k].values_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (fd - analytic[e]).abs() / fd.abs().max(analytic[e].abs()).max(1e-8);
                assert!(
                    err < tol || (fd - analytic[e]).abs() < 1e-9,
                    "input {k} entry {e}: fd {fd} vs analytic {}",
                    analytic[e]
                );
            }
        }
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::identity(2));
        let m = t.constant(Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]));
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).values(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(Tensor::from_rows(&[[1.0, 2.0]]));
        let b = t.constant(Tensor::from_rows(&[[3.0], [4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).values(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        assert!(matches!(
            t.matmul(a, b),
            Err(DiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        check_grads(
            &[a, b],
            |t, v| {
                let p = t.matmul(v[0], v[1]).unwrap();
                t.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[0.0, 0.0], [2f64.ln(), 0.0]]));
        let s = t.row_softmax(a).unwrap();
        let v = t.value(s);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert!((v.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((v.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[1000.0, 999.0, -1000.0]]));
        let s = t.row_softmax(a).unwrap();
        assert!(t.value(s).is_finite());
        let total: f64 = t.value(s).values().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_examples() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::from_rows(&[[0.0, -800.0]]));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).get(0, 0), 0.5);
        let tiny = t.value(s).get(0, 1);
        assert!(tiny > 0.0 && tiny <= SIGMOID_FLOOR);
        let picked = t.constant(Tensor::from_rows(&[[1.0, 0.0]]));
        let m = t.mul(s, picked).unwrap();
        let l = t.sum(m);
        t.backward(l).unwrap();
        assert!((t.grad(z).unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn relu_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[-1.0, 0.0, 2.0]]));
        let r = t.relu(a);
        assert_eq!(t.value(r).values(), &[0.0, 0.0, 2.0]);
        let b = t.constant(Tensor::from_rows(&[[-1.0, -3.0]]));
        let r = t.relu(b);
        assert_eq!(t.value(r).values(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[[0.0, 1.0]]));
        let r = t.relu(a);
        let l = t.sum(r);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[1.0], [2.0]]));
        let b = t.constant(Tensor::from_rows(&[[3.0], [4.0]]));
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(c).values(), &[1.0, 3.0, 2.0, 4.0]);
        let single = t.concat_cols(&[a]).unwrap();
        assert_eq!(t.value(single), t.value(a));

        let bad = t.constant(Tensor::zeros(3, 1));
        assert!(t.concat_cols(&[a, bad]).is_err());
        assert_eq!(t.concat_cols(&[]), Err(DiffError::EmptyConcat));
    }

    #[test]
    fn concat_gradient_routes_ones() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 1));
        let b = t.leaf(Tensor::zeros(2, 3));
        let c = t.concat_cols(&[a, b]).unwrap();
        let l = t.sum(c);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0; 2]);
        assert_eq!(t.grad(b).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn standard_suite_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let a = t.constant(random(&mut rng, 2, 3));
        let z = t.constant(Tensor::zeros(2, 3));
        let s = t.add(a, z).unwrap();
        assert_eq!(t.value(s), t.value(a));
        let tr = t.transpose(a).unwrap();
        let trtr = t.transpose(tr).unwrap();
        assert_eq!(t.value(trtr), t.value(a));
        let one = t.constant(Tensor::scalar(1.0));
        let l = t.log(one);
        assert_eq!(t.value(l).item(), 0.0);
        let zero = t.constant(Tensor::scalar(0.0));
        let l = t.log(zero);
        assert_eq!(t.value(l).item(), LOG_FLOOR.ln());
    }

    #[test]
    fn sum_of_leaf_gives_ones_and_backward_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let w = t.leaf(random(&mut rng, 3, 2));
        let l = t.sum(w);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0; 6]);

        let a = t.leaf(random(&mut rng, 2, 3));
        let b = t.leaf(random(&mut rng, 3, 2));
        let p = t.matmul(a, b).unwrap();
        let l = t.sum(p);
        t.zero_grad();
        t.backward(l).unwrap();
        let once = t.grad(a).unwrap().to_vec();
        t.backward(l).unwrap();
        let twice = t.grad(a).unwrap();
        for (x, y) in once.iter().zip(twice) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 2));
        assert!(matches!(t.backward(a), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::filled(2, 2, 1.0));
        let w = t.leaf(Tensor::filled(2, 2, 2.0));
        let p = t.matmul(c, w).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert!(t.grad(c).is_none());
        assert!(t.grad(w).is_some());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4);
        let pos = Tensor::from_fn(3, 4, |_, _| rng.gen_range(0.2..2.0));
        let row = random(&mut rng, 1, 4);
        // Weighted sums keep the gradients from being trivially uniform.
        let weights = random(&mut rng, 3, 4);
        let weights_t = weights.transposed();
        let wsum = move |t: &mut Tape, x: Var| {
            let w = if t.value(x).rows() == 3 {
                t.constant(weights.clone())
            } else {
                t.constant(weights_t.clone())
            };
            let m = t.mul(x, w).unwrap();
            t.sum(m)
        };
        check_grads(
            &[a.clone(), b.clone()],
            |t, v| {
                let x = t.add(v[0], v[1]).unwrap();
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[a.clone(), b.clone()],
            |t, v| {
                let x = t.sub(v[0], v[1]).unwrap();
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[a.clone(), b.clone()],
            |t, v| {
                let x = t.mul(v[0], v[1]).unwrap();
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[a.clone(), row],
            |t, v| {
                let x = t.add_row_broadcast(v[0], v[1]).unwrap();
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[a.clone()],
            |t, v| {
                let x = t.scale(v[0], -1.7);
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[a.clone()],
            |t, v| {
                let x = t.add_scalar(v[0], 0.3);
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[a.clone()],
            |t, v| {
                let x = t.transpose(v[0]).unwrap();
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[a.clone()],
            |t, v| {
                let x = t.row_softmax(v[0]).unwrap();
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[a.clone()],
            |t, v| {
                let x = t.sigmoid(v[0]);
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[pos.clone()],
            |t, v| {
                let x = t.log(v[0]);
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[pos.clone()],
            |t, v| {
                let x = t.row_normalize(v[0]).unwrap();
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[pos.clone()],
            |t, v| {
                let x = t.col_normalize(v[0]).unwrap();
                wsum(t, x)
            },
            1e-6,
        );
        let away_from_kink = Tensor::from_fn(3, 4, |_, _| {
            let z: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                z
            } else {
                -z
            }
        });
        check_grads(
            &[away_from_kink],
            |t, v| {
                let x = t.relu(v[0]);
                wsum(t, x)
            },
            1e-6,
        );
        check_grads(
            &[a.clone(), b.clone()],
            |t, v| {
                let x = t.concat_cols(&[v[0], v[1]]).unwrap();
                let y = t.concat_cols(&[x]).unwrap();
                let bt = t.transpose(y).unwrap();
                let p = t.matmul(y, bt).unwrap();
                let s = t.sigmoid(p);
                t.sum(s)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let r = rng.gen_range(1..8);
            let c = rng.gen_range(1..8);
            let x = Tensor::from_fn(r, c, |_, _| rng.gen_range(-30.0..30.0));
            let mut t = Tape::new();
            let v = t.constant(x);
            let s = t.row_softmax(v).unwrap();
            for i in 0..r {
                let total: f64 = t.value(s).row(i).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
