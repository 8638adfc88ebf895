//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its variables in
//! execution order. [`Tape::backward`] walks the record in reverse and
//! accumulates vector-Jacobian products into one gradient per node.
//!
//! Binary arithmetic (`add`, `sub`, `mul`) broadcasts in two dimensions:
//! each dimension must match or be 1 on one side.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{self, broadcast_zip, reduce_to, sigmoid_scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine {
        x: usize,
        scale: f64,
        shift: f64,
    },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    SoftmaxRows(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Gather {
        x: usize,
        cells: Vec<(usize, usize)>,
    },
    SumAll(usize),
    MeanAll(usize),
    RowSums(usize),
    ColMeans(usize),
    NormalizeRows {
        x: usize,
        eps: f64,
    },
    Conv1d {
        x: usize,
        kernel: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Conv1d { x, kernel } => vec![*x, *kernel],
            ConcatCols(xs) | ConcatRows(xs) => xs.clone(),
            Affine { x, .. }
            | Clamp { x, .. }
            | SliceCols { x, .. }
            | SliceRows { x, .. }
            | GatherRows { x, .. }
            | Gather { x, .. }
            | NormalizeRows { x, .. } => vec![*x],
            Sigmoid(x) | Tanh(x) | Relu(x) | Exp(x) | Log(x) | SoftmaxRows(x) | Transpose(x)
            | SumAll(x) | MeanAll(x) | RowSums(x) | ColMeans(x) => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph. Single-writer; not `Sync` by intent of use.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves are the variables gradients are reported for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: value.as_matrix(),
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = evaluate(&op, |i| &self.nodes[i].value)?;
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }
}

fn evaluate<'a>(op: &Op, val: impl Fn(usize) -> &'a Tensor) -> Result<Tensor> {
    use Op::*;
    Ok(match op {
        Leaf => unreachable!("leaves are not evaluated"),
        MatMul(a, b) => tensor::matmul(val(*a), val(*b))?,
        Add(a, b) => broadcast_zip(val(*a), val(*b), |x, y| x + y, "add")?,
        Sub(a, b) => broadcast_zip(val(*a), val(*b), |x, y| x - y, "sub")?,
        Mul(a, b) => broadcast_zip(val(*a), val(*b), |x, y| x * y, "mul")?,
        Affine { x, scale, shift } => val(*x).map(|v| scale * v + shift),
        Sigmoid(x) => val(*x).map(sigmoid_scalar),
        Tanh(x) => val(*x).map(f64::tanh),
        Relu(x) => val(*x).map(|v| v.max(0.0)),
        Exp(x) => val(*x).map(f64::exp),
        Log(x) => val(*x).map(f64::ln),
        Clamp { x, lo, hi } => val(*x).map(|v| v.clamp(*lo, *hi)),
        SoftmaxRows(x) => tensor::softmax_rows(val(*x))?,
        Transpose(x) => val(*x).transpose(),
        ConcatCols(xs) => {
            let rows = val(xs[0]).rows();
            if xs.iter().any(|&i| val(i).rows() != rows) {
                let shapes: Vec<_> = xs.iter().map(|&i| val(i).shape().to_vec()).collect();
                return Err(Error::shape(format!(
                    "concat_cols of {shapes:?}: row counts differ"
                )));
            }
            let cols: usize = xs.iter().map(|&i| val(i).cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &i in xs {
                    data.extend_from_slice(val(i).row_slice(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        }
        SliceCols { x, start, len } => {
            let t = val(*x);
            let (r, c) = t.dims();
            if *len == 0 || start + len > c {
                return Err(Error::shape(format!(
                    "slice_cols {start}..{} of {:?}",
                    start + len,
                    t.shape()
                )));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.row_slice(i)[*start..start + len]);
            }
            Tensor::matrix(r, *len, data)?
        }
        ConcatRows(xs) => {
            let cols = val(xs[0]).cols();
            if xs.iter().any(|&i| val(i).cols() != cols) {
                let shapes: Vec<_> = xs.iter().map(|&i| val(i).shape().to_vec()).collect();
                return Err(Error::shape(format!(
                    "concat_rows of {shapes:?}: column counts differ"
                )));
            }
            let data: Vec<f64> = xs
                .iter()
                .flat_map(|&i| val(i).data().iter().copied())
                .collect();
            Tensor::matrix(data.len() / cols, cols, data)?
        }
        SliceRows { x, start, len } => {
            let t = val(*x);
            let (r, c) = t.dims();
            if *len == 0 || start + len > r {
                return Err(Error::shape(format!(
                    "slice_rows {start}..{} of {:?}",
                    start + len,
                    t.shape()
                )));
            }
            Tensor::matrix(*len, c, t.data()[start * c..(start + len) * c].to_vec())?
        }
        GatherRows { x, rows } => {
            let t = val(*x);
            let (r, c) = t.dims();
            let mut data = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                if i >= r {
                    return Err(Error::shape(format!(
                        "row {i} out of range for {:?}",
                        t.shape()
                    )));
                }
                data.extend_from_slice(t.row_slice(i));
            }
            Tensor::matrix(rows.len(), c, data)?
        }
        Gather { x, cells } => {
            let t = val(*x);
            let (r, c) = t.dims();
            let mut data = Vec::with_capacity(cells.len());
            for &(i, j) in cells {
                if i >= r || j >= c {
                    return Err(Error::shape(format!(
                        "cell ({i}, {j}) out of range for {:?}",
                        t.shape()
                    )));
                }
                data.push(t.at(i, j));
            }
            Tensor::matrix(cells.len(), 1, data)?
        }
        SumAll(x) => Tensor::scalar(val(*x).data().iter().sum()),
        MeanAll(x) => {
            let t = val(*x);
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        }
        RowSums(x) => {
            let t = val(*x);
            let data = (0..t.rows()).map(|i| t.row_slice(i).iter().sum()).collect();
            Tensor::matrix(t.rows(), 1, data)?
        }
        ColMeans(x) => {
            let t = val(*x);
            let (r, c) = t.dims();
            let mut data = vec![0.0; c];
            for i in 0..r {
                for (d, v) in data.iter_mut().zip(t.row_slice(i)) {
                    *d += v;
                }
            }
            data.iter_mut().for_each(|d| *d /= r as f64);
            Tensor::matrix(1, c, data)?
        }
        NormalizeRows { x, eps } => {
            let t = val(*x);
            let (r, c) = t.dims();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                let (mean, inv_std, _) = row_stats(t.row_slice(i), *eps);
                data.extend(t.row_slice(i).iter().map(|v| (v - mean) * inv_std));
            }
            Tensor::matrix(r, c, data)?
        }
        Conv1d { x, kernel } => {
            let (t, k) = (val(*x), val(*kernel));
            let (r, c) = t.dims();
            let kl = k.len();
            if kl > c {
                return Err(Error::shape(format!(
                    "kernel of length {kl} is longer than input of length {c}"
                )));
            }
            let out_len = c - kl + 1;
            let mut data = Vec::with_capacity(r * out_len);
            for i in 0..r {
                let row = t.row_slice(i);
                for j in 0..out_len {
                    data.push(
                        row[j..j + kl]
                            .iter()
                            .zip(k.data())
                            .map(|(a, b)| a * b)
                            .sum(),
                    );
                }
            }
            Tensor::matrix(r, out_len, data)?
        }
    })
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.push(Op::Sub(a, b))
    }

    /// Broadcasting Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.push(Op::Mul(a, b))
    }

    /// `scale * x + shift`, pointwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::Log(x))
    }

    /// Pointwise clamp; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::Clamp { x, lo, hi })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::SoftmaxRows(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::Transpose(x))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let xs = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        self.push(Op::ConcatCols(xs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let xs = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        self.push(Op::ConcatRows(xs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::SliceRows { x, start, len })
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::GatherRows { x, rows })
    }

    /// Picks `(row, col)` cells into a `k × 1` column.
    pub fn gather(&mut self, x: Var, cells: Vec<(usize, usize)>) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::Gather { x, cells })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::MeanAll(x))
    }

    /// `m × n → m × 1`.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::RowSums(x))
    }

    /// `m × n → 1 × n`.
    pub fn col_means(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::ColMeans(x))
    }

    /// Per-row `(x - mean) / sqrt(max(var, eps))` with population variance.
    /// `eps` only guards near-constant rows; other rows get unit std exactly.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let x = self.check(x)?;
        self.push(Op::NormalizeRows { x, eps })
    }

    /// Valid 1-D cross-correlation of every row of `x` with `kernel`.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (x, kernel) = (self.check(x)?, self.check(kernel)?);
        self.push(Op::Conv1d { x, kernel })
    }

    /// Recomputes every non-leaf node from its inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    debug_assert!(op.inputs().iter().all(|&i| i < values.len()));
                    evaluate(op, |i| &values[i])?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.val(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        let (r, c) = self.val(root).dims();
        grads[root] = Some(Tensor::filled(r, c, 1.0));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        use Op::*;
        let y = self.val(i);
        let mut acc = |j: usize, d: Tensor| match &mut grads[j] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(d.data()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(d),
        };
        match &self.nodes[i].op {
            Leaf => {}
            MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(
                    *a,
                    tensor::matmul(g, &bv.transpose()).expect("shapes checked on forward"),
                );
                acc(
                    *b,
                    tensor::matmul(&av.transpose(), g).expect("shapes checked on forward"),
                );
            }
            Add(a, b) => {
                acc(*a, reduce_to(g, self.val(*a).dims()));
                acc(*b, reduce_to(g, self.val(*b).dims()));
            }
            Sub(a, b) => {
                acc(*a, reduce_to(g, self.val(*a).dims()));
                acc(*b, reduce_to(&g.map(|v| -v), self.val(*b).dims()));
            }
            Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let ga =
                    broadcast_zip(g, bv, |x, y| x * y, "mul").expect("shapes checked on forward");
                let gb =
                    broadcast_zip(g, av, |x, y| x * y, "mul").expect("shapes checked on forward");
                acc(*a, reduce_to(&ga, av.dims()));
                acc(*b, reduce_to(&gb, bv.dims()));
            }
            Affine { x, scale, .. } => acc(*x, g.map(|v| v * scale)),
            Sigmoid(x) => acc(*x, zip(g, y, |g, y| g * y * (1.0 - y))),
            Tanh(x) => acc(*x, zip(g, y, |g, y| g * (1.0 - y * y))),
            Relu(x) => acc(
                *x,
                zip(g, self.val(*x), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Exp(x) => acc(*x, zip(g, y, |g, y| g * y)),
            Log(x) => acc(*x, zip(g, self.val(*x), |g, x| g / x)),
            Clamp { x, lo, hi } => acc(
                *x,
                zip(
                    g,
                    self.val(*x),
                    |g, x| if x > *lo && x < *hi { g } else { 0.0 },
                ),
            ),
            SoftmaxRows(x) => {
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), &g.data()[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                acc(*x, Tensor::matrix(y.rows(), c, d).expect("same shape"));
            }
            Transpose(x) => acc(*x, g.transpose()),
            ConcatCols(xs) => {
                let mut offset = 0;
                for &j in xs {
                    let (r, c) = self.val(j).dims();
                    let mut d = Vec::with_capacity(r * c);
                    for row in 0..r {
                        d.extend_from_slice(&g.row_slice(row)[offset..offset + c]);
                    }
                    acc(j, Tensor::matrix(r, c, d).expect("same shape"));
                    offset += c;
                }
            }
            SliceCols { x, start, len } => {
                let (r, c) = self.val(*x).dims();
                let mut d = Tensor::zeros(r, c);
                for row in 0..r {
                    d.data_mut()[row * c + start..row * c + start + len]
                        .copy_from_slice(g.row_slice(row));
                }
                acc(*x, d);
            }
            ConcatRows(xs) => {
                let mut offset = 0;
                for &j in xs {
                    let n = self.val(j).len();
                    let (r, c) = self.val(j).dims();
                    acc(
                        j,
                        Tensor::matrix(r, c, g.data()[offset..offset + n].to_vec())
                            .expect("same shape"),
                    );
                    offset += n;
                }
            }
            SliceRows { x, start, len } => {
                let (r, c) = self.val(*x).dims();
                let mut d = Tensor::zeros(r, c);
                d.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                acc(*x, d);
            }
            GatherRows { x, rows } => {
                let (r, c) = self.val(*x).dims();
                let mut d = Tensor::zeros(r, c);
                for (k, &row) in rows.iter().enumerate() {
                    for (dv, gv) in d.data_mut()[row * c..(row + 1) * c]
                        .iter_mut()
                        .zip(g.row_slice(k))
                    {
                        *dv += gv;
                    }
                }
                acc(*x, d);
            }
            Gather { x, cells } => {
                let (r, c) = self.val(*x).dims();
                let mut d = Tensor::zeros(r, c);
                for (k, &(i, j)) in cells.iter().enumerate() {
                    d.data_mut()[i * c + j] += g.data()[k];
                }
                acc(*x, d);
            }
            SumAll(x) => {
                let gv = g.data()[0];
                acc(*x, self.val(*x).map(|_| gv));
            }
            MeanAll(x) => {
                let n = self.val(*x).len() as f64;
                let gv = g.data()[0] / n;
                acc(*x, self.val(*x).map(|_| gv));
            }
            RowSums(x) => {
                let (r, c) = self.val(*x).dims();
                let d = (0..r)
                    .flat_map(|row| std::iter::repeat_n(g.data()[row], c))
                    .collect();
                acc(*x, Tensor::matrix(r, c, d).expect("same shape"));
            }
            ColMeans(x) => {
                let (r, c) = self.val(*x).dims();
                let d = (0..r)
                    .flat_map(|_| g.data().iter().map(|v| v / r as f64))
                    .collect();
                acc(*x, Tensor::matrix(r, c, d).expect("same shape"));
            }
            NormalizeRows { x, eps } => {
                let xv = self.val(*x);
                let (r, c) = xv.dims();
                let mut d = Vec::with_capacity(r * c);
                for row in 0..r {
                    let (_, inv_std, floored) = row_stats(xv.row_slice(row), *eps);
                    let (yr, gr) = (y.row_slice(row), g.row_slice(row));
                    let g_mean = gr.iter().sum::<f64>() / c as f64;
                    let gy_mean = if floored {
                        0.0
                    } else {
                        gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64
                    };
                    d.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(g, y)| inv_std * (g - g_mean - y * gy_mean)),
                    );
                }
                acc(*x, Tensor::matrix(r, c, d).expect("same shape"));
            }
            Conv1d { x, kernel } => {
                let (xv, kv) = (self.val(*x), self.val(*kernel));
                let (r, c) = xv.dims();
                let (kl, out_len) = (kv.len(), g.cols());
                let mut dx = Tensor::zeros(r, c);
                let mut dk = vec![0.0; kl];
                for row in 0..r {
                    let (xr, gr) = (xv.row_slice(row), g.row_slice(row));
                    for j in 0..out_len {
                        for t in 0..kl {
                            dx.data_mut()[row * c + j + t] += gr[j] * kv.data()[t];
                            dk[t] += gr[j] * xr[j + t];
                        }
                    }
                }
                acc(*x, dx);
                let (kr, kc) = kv.dims();
                acc(*kernel, Tensor::matrix(kr, kc, dk).expect("same shape"));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = a.dims();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::matrix(r, c, data).expect("same shape")
}

/// Row mean and `1 / sqrt(max(var, eps))`; the flag is set when the floor
/// applied, which makes the scale a constant.
fn row_stats(row: &[f64], eps: f64) -> (f64, f64, bool) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let floored = var < eps;
    (mean, 1.0 / var.max(eps).sqrt(), floored)
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Result<Option<&Tensor>> {
        if v.tape != self.tape {
            return Err(Error::Graph(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(self.grads.get(v.index).and_then(Option::as_ref))
    }

    /// Gradient for `v`; zeros shaped like `value` when `v` is unreachable.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Result<Tensor> {
        match self.get(v)? {
            Some(g) => Ok(g.clone()),
            None => Ok(Tensor::zeros_like(tape.value(v)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_theta() {
        let mut tape = Tape::new();
        let theta = tape.scalar(3.0);
        let loss = tape.mul(theta, theta).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(theta, &tape).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::row(vec![1.0, 2.0]).unwrap());
        let c = tape.scalar(4.0);
        let loss = tape.affine(c, 1.0, 1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(theta, &tape).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_variables_are_graph_errors() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.scalar(1.0);
        let y = b.scalar(2.0);
        assert!(matches!(b.add(x, y), Err(Error::Graph(_))));
        assert!(matches!(b.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn replay_reproduces_cached_values() {
        let mut tape = Tape::new();
        let x =
            tape.leaf(Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.5, -0.7]]).unwrap());
        let w = tape
            .leaf(Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.5, -0.6]]).unwrap());
        let h = tape.matmul(x, w).unwrap();
        let s = tape.softmax_rows(h).unwrap();
        let n = tape.normalize_rows(x, 1e-5).unwrap();
        let c = tape.concat_cols(&[s, n]).unwrap();
        let t = tape.tanh(c).unwrap();
        let _ = tape.mean(t).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, &tape.nodes[i].value);
        }
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(3, 2));
        let b = tape.leaf(Tensor::row(vec![1.0, 2.0]).unwrap());
        let y = tape.add(x, b).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(tape.value(loss).unwrap().data(), &[9.0]);
        assert_eq!(grads.wrt(b, &tape).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn conv_kernel_longer_than_input_is_shape_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]).unwrap());
        let k = tape.leaf(Tensor::row(vec![1.0, 1.0, 1.0]).unwrap());
        assert!(matches!(tape.conv1d(x, k), Err(Error::Shape(_))));
    }
}
