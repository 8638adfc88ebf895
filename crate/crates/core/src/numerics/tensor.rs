use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Every operation in this crate works on rank-2 views: a rank-1 tensor of
/// length `n` is read as a `1 × n` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("invalid shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// A `1 × n` row vector.
    pub fn row(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::matrix(1, n, values)
    }

    /// A `1 × 1` tensor.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of the rank-2 view; leading dimensions fold into rows.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap();
                (self.data.len() / c, c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub(crate) fn as_matrix(&self) -> Tensor {
        let (r, c) = self.dims();
        Tensor {
            shape: vec![r, c],
            data: self.data.clone(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Matrix product with a fixed left-to-right reduction over the inner
/// dimension.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul of {:?} and {:?}: inner dimensions differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Output dims of a 2-D broadcast; each dimension must match or be 1.
pub(crate) fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

pub(crate) fn broadcast_zip(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    what: &str,
) -> Result<Tensor> {
    let (ad, bd) = (a.dims(), b.dims());
    let (r, c) = broadcast_dims(ad, bd).ok_or_else(|| {
        Error::shape(format!(
            "{what} of {:?} and {:?}: shapes do not broadcast",
            a.shape(),
            b.shape()
        ))
    })?;
    if ad == bd {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: vec![r, c],
            data,
        });
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let (ai, bi) = (if ad.0 == 1 { 0 } else { i }, if bd.0 == 1 { 0 } else { i });
        for j in 0..c {
            let (aj, bj) = (if ad.1 == 1 { 0 } else { j }, if bd.1 == 1 { 0 } else { j });
            data.push(f(a.data[ai * ad.1 + aj], b.data[bi * bd.1 + bj]));
        }
    }
    Ok(Tensor {
        shape: vec![r, c],
        data,
    })
}

/// Sum a broadcast gradient back down to `target` dims.
pub(crate) fn reduce_to(grad: &Tensor, target: (usize, usize)) -> Tensor {
    let (r, c) = grad.dims();
    if (r, c) == target {
        return grad.clone();
    }
    let mut out = vec![0.0; target.0 * target.1];
    for i in 0..r {
        let ti = if target.0 == 1 { 0 } else { i };
        for j in 0..c {
            let tj = if target.1 == 1 { 0 } else { j };
            out[ti * target.1 + tj] += grad.data[i * c + j];
        }
    }
    Tensor {
        shape: vec![target.0, target.1],
        data: out,
    }
}

/// Pointwise operations exposed as a single entry point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Hadamard,
}

pub fn elementwise(op: Elementwise, args: &[&Tensor]) -> Result<Tensor> {
    let unary = |args: &[&Tensor]| -> Result<Tensor> {
        match args {
            [x] => Ok((*x).clone()),
            _ => Err(Error::contract(format!(
                "{op:?} takes one argument, got {}",
                args.len()
            ))),
        }
    };
    let binary = |args: &[&Tensor]| -> Result<(Tensor, Tensor)> {
        match args {
            [a, b] if a.shape() == b.shape() => Ok(((*a).clone(), (*b).clone())),
            [a, b] => Err(Error::shape(format!(
                "{op:?} of {:?} and {:?}: shapes differ",
                a.shape(),
                b.shape()
            ))),
            _ => Err(Error::contract(format!(
                "{op:?} takes two arguments, got {}",
                args.len()
            ))),
        }
    };
    match op {
        Elementwise::Sigmoid => Ok(unary(args)?.map(sigmoid_scalar)),
        Elementwise::Tanh => Ok(unary(args)?.map(f64::tanh)),
        Elementwise::Relu => Ok(unary(args)?.map(|x| x.max(0.0))),
        Elementwise::Add | Elementwise::Hadamard => {
            let (a, b) = binary(args)?;
            let f = if op == Elementwise::Add {
                |x: f64, y: f64| x + y
            } else {
                |x: f64, y: f64| x * y
            };
            let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor {
                shape: a.shape,
                data,
            })
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Softmax over all entries of a vector, with max subtraction.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() {
        return Err(Error::shape("softmax of an empty tensor"));
    }
    let mut out = v.clone();
    softmax_in_place(&mut out.data);
    Ok(out)
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if m.is_empty() {
        return Err(Error::shape("softmax of an empty tensor"));
    }
    let mut out = m.as_matrix();
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}
