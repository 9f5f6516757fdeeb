//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Values are pushed as
//! leaves (learned parameters) or constants (data, noise draws), every
//! operation appends a node holding its output, and [`Tape::backward`]
//! sweeps the nodes in reverse to produce a [`Gradients`] table.
//!
//! Broadcasting is limited to a one-element operand against a tensor of any
//! shape. Row tiling for biases goes through [`Tape::repeat_rows`].

use std::ops::Range;

use crate::error::{Error, Result};

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
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

    /// Rows when viewed as a matrix; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Square,
    Clamp(f64, f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, trans_b: bool },
    Binary { op: Binary, a: Var, b: Var },
    Unary { op: Unary, a: Var },
    SoftmaxRows(Var),
    Conv { z: Var, k: Var, groups: usize },
    Sum(Var),
    SumAxis(Var, Axis),
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { a: Var, rows: Range<usize>, cols: Range<usize> },
    SelectRows { a: Var, idx: Vec<usize> },
    SelectCols { a: Var, idx: Vec<usize> },
    RepeatRows { a: Var, times: usize },
    Transpose(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Every leaf has one; interior
    /// nodes keep theirs only if the sweep reached them.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::dim(format!(
            "{what} requires a matrix, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `c = beta * c + a' b'` with `a'` m×k and `b'` k×n, where the primes
/// optionally transpose a stored matrix.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted buffer lengths cover every index reachable with
    // the given dimensions and strides.
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Zero-padded per-group cross-correlation of each row of `z` (`rows × groups·len`)
/// with the matching row of `k` (`groups × width`).
fn conv_forward(z: &[f64], rows: usize, cols: usize, k: &[f64], groups: usize, width: usize) -> Vec<f64> {
    let len = cols / groups;
    let pad = (width - 1) / 2;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for g in 0..groups {
            let base = r * cols + g * len;
            let kg = &k[g * width..(g + 1) * width];
            for i in 0..len {
                let mut acc = 0.0;
                for (j, &kj) in kg.iter().enumerate() {
                    let src = i + j;
                    if src < pad || src - pad >= len {
                        continue;
                    }
                    acc += kj * z[base + src - pad];
                }
                out[base + i] = acc;
            }
        }
    }
    out
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input; receives a gradient buffer on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiated input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = check_2d(self.value(a), "matmul")?;
        let (br, bc) = check_2d(self.value(b), "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {m}x{k} by {kb}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            trans_b,
            &mut out,
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul { a, b, trans_b },
            ng,
        ))
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if va.shape == vb.shape {
            Tensor {
                shape: va.shape.clone(),
                data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else if vb.len() == 1 {
            let y = vb.data[0];
            Tensor {
                shape: va.shape.clone(),
                data: va.data.iter().map(|&x| f(x, y)).collect(),
            }
        } else if va.len() == 1 {
            let x = va.data[0];
            Tensor {
                shape: vb.shape.clone(),
                data: vb.data.iter().map(|&y| f(x, y)).collect(),
            }
        } else {
            return Err(Error::dim(format!(
                "elementwise operands {:?} and {:?} differ",
                va.shape, vb.shape
            )));
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Binary { op, a, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let va = self.value(a);
        if op == Unary::Log {
            if let Some(bad) = va.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let f: Box<dyn Fn(f64) -> f64> = match op {
            Unary::Neg => Box::new(|x| -x),
            Unary::Scale(c) => Box::new(move |x| c * x),
            Unary::AddScalar(c) => Box::new(move |x| x + c),
            Unary::Exp => Box::new(f64::exp),
            Unary::Log => Box::new(f64::ln),
            Unary::Tanh => Box::new(f64::tanh),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Softplus => Box::new(softplus),
            Unary::Square => Box::new(|x| x * x),
            Unary::Clamp(lo, hi) => Box::new(move |x| x.clamp(lo, hi)),
        };
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        let ng = self.ng(a);
        Ok(self.push(value, Op::Unary { op, a }, ng))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    /// Pointwise clamp; the gradient is zero where the input lies outside
    /// `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::config(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(Unary::Clamp(lo, hi), a)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = check_2d(self.value(a), "softmax_rows")?;
        let src = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * n..(r + 1) * n];
            let mut s = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                s += *d;
            }
            dst.iter_mut().for_each(|d| *d /= s);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::SoftmaxRows(a),
            ng,
        ))
    }

    /// Per-group 1-D cross-correlation with zero padding `(width-1)/2` and
    /// stride 1. `z` is `rows × (groups·len)`; `kernels` is `groups × width`
    /// with odd `width`. Output has the shape of `z`.
    pub fn grouped_conv(&mut self, z: Var, kernels: Var) -> Result<Var> {
        let (rows, cols) = check_2d(self.value(z), "grouped_conv input")?;
        let (groups, width) = check_2d(self.value(kernels), "grouped_conv kernels")?;
        if width % 2 == 0 {
            return Err(Error::config(format!("kernel width {width} must be odd")));
        }
        if groups == 0 || cols % groups != 0 || cols == 0 {
            return Err(Error::dim(format!(
                "{cols} latent columns cannot be split into {groups} groups"
            )));
        }
        let out = conv_forward(
            &self.value(z).data,
            rows,
            cols,
            &self.value(kernels).data,
            groups,
            width,
        );
        let ng = self.ng(z) || self.ng(kernels);
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data: out,
            },
            Op::Conv {
                z,
                k: kernels,
                groups,
            },
            ng,
        ))
    }

    /// `groups × len` input convolved group by group with `groups × width`
    /// kernels.
    pub fn conv1d_grouped(&mut self, z: Var, kernels: Var) -> Result<Var> {
        let (groups, len) = check_2d(self.value(z), "conv1d_grouped input")?;
        let flat = self.reshape(z, &[1, groups * len])?;
        let out = self.grouped_conv(flat, kernels)?;
        self.reshape(out, &[groups, len])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::dim("mean of empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum along an axis of a matrix. `Rows` collapses the row index
    /// (result `1 × cols`); `Cols` collapses columns (result `rows × 1`).
    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (m, n) = check_2d(self.value(a), "sum_axis")?;
        let src = &self.value(a).data;
        let value = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for (o, &x) in out.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                        *o += x;
                    }
                }
                Tensor {
                    shape: vec![1, n],
                    data: out,
                }
            }
            Axis::Cols => Tensor {
                shape: vec![m, 1],
                data: (0..m).map(|r| src[r * n..(r + 1) * n].iter().sum()).collect(),
            },
        };
        let ng = self.ng(a);
        Ok(self.push(value, Op::SumAxis(a, axis), ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (m, n) = check_2d(self.value(a), "mean_axis")?;
        let count = match axis {
            Axis::Rows => m,
            Axis::Cols => n,
        };
        if count == 0 {
            return Err(Error::dim("mean over empty axis"));
        }
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / count as f64)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| check_2d(self.value(p), "concat"))
            .collect::<Result<_>>()?;
        let value = match axis {
            Axis::Rows => {
                let n = dims[0].1;
                if dims.iter().any(|d| d.1 != n) {
                    return Err(Error::dim("row concat needs equal column counts"));
                }
                let mut data = Vec::with_capacity(dims.iter().map(|d| d.0 * n).sum());
                for &p in parts {
                    data.extend_from_slice(&self.value(p).data);
                }
                Tensor {
                    shape: vec![dims.iter().map(|d| d.0).sum(), n],
                    data,
                }
            }
            Axis::Cols => {
                let m = dims[0].0;
                if dims.iter().any(|d| d.0 != m) {
                    return Err(Error::dim("column concat needs equal row counts"));
                }
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(m * total);
                for r in 0..m {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor {
                    shape: vec![m, total],
                    data,
                }
            }
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (m, n) = check_2d(self.value(a), "slice")?;
        if rows.start > rows.end || rows.end > m || cols.start > cols.end || cols.end > n {
            return Err(Error::dim(format!(
                "slice [{rows:?}, {cols:?}] outside {m}x{n}"
            )));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&src.data[r * n + cols.start..r * n + cols.end]);
        }
        let value = Tensor {
            shape: vec![rows.len(), cols.len()],
            data,
        };
        let ng = self.ng(a);
        Ok(self.push(value, Op::Slice { a, rows, cols }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Result<Var> {
        let m = self.value(a).rows();
        self.slice(a, 0..m, cols)
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        let n = self.value(a).cols();
        self.slice(a, rows, 0..n)
    }

    /// Gathers rows by index (repeats allowed; gradients scatter-add).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = check_2d(self.value(a), "select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim(format!("row index {bad} out of {m}")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor {
            shape: vec![idx.len(), n],
            data,
        };
        let ng = self.ng(a);
        Ok(self.push(
            value,
            Op::SelectRows {
                a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Gathers columns by index (repeats allowed; gradients scatter-add).
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = check_2d(self.value(a), "select_cols")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("column index {bad} out of {n}")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * m);
        for r in 0..m {
            let row = src.row(r);
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let value = Tensor {
            shape: vec![m, idx.len()],
            data,
        };
        let ng = self.ng(a);
        Ok(self.push(
            value,
            Op::SelectCols {
                a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Stacks `times` copies of a `1 × n` row (or any matrix) vertically.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (m, n) = check_2d(self.value(a), "repeat_rows")?;
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(times * m * n);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let value = Tensor {
            shape: vec![times * m, n],
            data,
        };
        let ng = self.ng(a);
        Ok(self.push(value, Op::RepeatRows { a, times }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = check_2d(self.value(a), "transpose")?;
        let src = &self.value(a).data;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = src[r * n + c];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::Transpose(a),
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// `x · w + b` for `x: m×k`, `w: k×n`, bias `b: 1×n`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let m = self.value(xw).rows();
        let tiled = self.repeat_rows(b, m)?;
        self.add(xw, tiled)
    }

    /// Reverse sweep from a one-element `loss`. Returns gradient buffers for
    /// every leaf (zero-filled where the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (g, &node.op) {
                (Some(g), _) => Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                }),
                (None, Op::Leaf) => Some(Tensor::zeros(&node.value.shape)),
                (None, _) => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        // Adds `contrib` into the gradient slot of `v`.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (val(a).shape[0], val(a).shape[1]);
                let n = node.value.shape[1];
                if wants(a) {
                    // dA = G · B'ᵀ
                    let ga = slot(grads, a, m * k);
                    gemm(m, n, k, g, false, &val(b).data, !trans_b, ga, 1.0);
                }
                if wants(b) {
                    let gb = slot(grads, b, k * n);
                    if trans_b {
                        // B stored n×k: dB = Gᵀ · A
                        gemm(n, m, k, g, true, &val(a).data, false, gb, 1.0);
                    } else {
                        gemm(k, m, n, &val(a).data, true, g, false, gb, 1.0);
                    }
                }
            }
            &Op::Binary { op, a, b } => {
                let (va, vb) = (val(a), val(b));
                let out_n = g.len();
                for (v, other, is_a) in [(a, vb, true), (b, va, false)] {
                    if !wants(v) {
                        continue;
                    }
                    let own = val(v);
                    let sign = if op == Binary::Sub && !is_a { -1.0 } else { 1.0 };
                    let s = slot(grads, v, own.len());
                    let local = |idx: usize| -> f64 {
                        match op {
                            Binary::Add | Binary::Sub => sign,
                            Binary::Mul => {
                                if other.len() == 1 {
                                    other.data[0]
                                } else {
                                    other.data[idx]
                                }
                            }
                        }
                    };
                    if own.len() == out_n {
                        for (idx, (s, &gi)) in s.iter_mut().zip(g).enumerate() {
                            *s += gi * local(idx);
                        }
                    } else {
                        // broadcast one-element operand
                        s[0] += g.iter().enumerate().map(|(idx, &gi)| gi * local(idx)).sum::<f64>();
                    }
                }
            }
            &Op::Unary { op, a } => {
                if !wants(a) {
                    return;
                }
                let x = &val(a).data;
                let y = &node.value.data;
                let s = slot(grads, a, x.len());
                for i in 0..g.len() {
                    let d = match op {
                        Unary::Neg => -1.0,
                        Unary::Scale(c) => c,
                        Unary::AddScalar(_) => 1.0,
                        Unary::Exp => y[i],
                        Unary::Log => 1.0 / x[i],
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Softplus => sigmoid(x[i]),
                        Unary::Square => 2.0 * x[i],
                        Unary::Clamp(lo, hi) => {
                            if x[i] >= lo && x[i] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    s[i] += g[i] * d;
                }
            }
            &Op::SoftmaxRows(a) => {
                if !wants(a) {
                    return;
                }
                let (m, n) = (node.value.shape[0], node.value.shape[1]);
                let y = &node.value.data;
                let s = slot(grads, a, m * n);
                for r in 0..m {
                    let row = r * n..(r + 1) * n;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for i in row {
                        s[i] += y[i] * (g[i] - dot);
                    }
                }
            }
            &Op::Conv { z, k, groups } => {
                let (rows, cols) = (val(z).shape[0], val(z).shape[1]);
                let width = val(k).shape[1];
                let len = cols / groups;
                let pad = (width - 1) / 2;
                let zd = &val(z).data;
                let kd = &val(k).data;
                if wants(z) {
                    let s = slot(grads, z, rows * cols);
                    for r in 0..rows {
                        for gi in 0..groups {
                            let base = r * cols + gi * len;
                            for i in 0..len {
                                let go = g[base + i];
                                for j in 0..width {
                                    let src = i + j;
                                    if src < pad || src - pad >= len {
                                        continue;
                                    }
                                    s[base + src - pad] += kd[gi * width + j] * go;
                                }
                            }
                        }
                    }
                }
                if wants(k) {
                    let s = slot(grads, k, groups * width);
                    for r in 0..rows {
                        for gi in 0..groups {
                            let base = r * cols + gi * len;
                            for i in 0..len {
                                let go = g[base + i];
                                for j in 0..width {
                                    let src = i + j;
                                    if src < pad || src - pad >= len {
                                        continue;
                                    }
                                    s[gi * width + j] += zd[base + src - pad] * go;
                                }
                            }
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if wants(a) {
                    let n = val(a).len();
                    slot(grads, a, n).iter_mut().for_each(|s| *s += g[0]);
                }
            }
            &Op::SumAxis(a, axis) => {
                if !wants(a) {
                    return;
                }
                let (m, n) = (val(a).shape[0], val(a).shape[1]);
                let s = slot(grads, a, m * n);
                for r in 0..m {
                    for c in 0..n {
                        s[r * n + c] += match axis {
                            Axis::Rows => g[c],
                            Axis::Cols => g[r],
                        };
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (pm, pn) = (val(p).shape[0], val(p).shape[1]);
                    if wants(p) {
                        let s = slot(grads, p, pm * pn);
                        match axis {
                            Axis::Rows => {
                                for (si, gi) in s.iter_mut().zip(&g[offset * pn..(offset + pm) * pn]) {
                                    *si += gi;
                                }
                            }
                            Axis::Cols => {
                                for r in 0..pm {
                                    let src = &g[r * total_cols + offset..r * total_cols + offset + pn];
                                    for (si, gi) in s[r * pn..(r + 1) * pn].iter_mut().zip(src) {
                                        *si += gi;
                                    }
                                }
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Rows => pm,
                        Axis::Cols => pn,
                    };
                }
            }
            Op::Slice { a, rows, cols } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let (m, n) = (val(a).shape[0], val(a).shape[1]);
                let w = cols.len();
                let s = slot(grads, a, m * n);
                for (ri, r) in rows.clone().enumerate() {
                    for (si, gi) in s[r * n + cols.start..r * n + cols.end].iter_mut().zip(&g[ri * w..(ri + 1) * w]) {
                        *si += gi;
                    }
                }
            }
            Op::SelectRows { a, idx } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let (m, n) = (val(a).shape[0], val(a).shape[1]);
                let s = slot(grads, a, m * n);
                for (ri, &r) in idx.iter().enumerate() {
                    for (si, gi) in s[r * n..(r + 1) * n].iter_mut().zip(&g[ri * n..(ri + 1) * n]) {
                        *si += gi;
                    }
                }
            }
            Op::SelectCols { a, idx } => {
                let a = *a;
                if !wants(a) {
                    return;
                }
                let (m, n) = (val(a).shape[0], val(a).shape[1]);
                let w = idx.len();
                let s = slot(grads, a, m * n);
                for r in 0..m {
                    for (ci, &c) in idx.iter().enumerate() {
                        s[r * n + c] += g[r * w + ci];
                    }
                }
            }
            &Op::RepeatRows { a, times } => {
                if !wants(a) {
                    return;
                }
                let n = val(a).len();
                let s = slot(grads, a, n);
                for t in 0..times {
                    for (si, gi) in s.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                        *si += gi;
                    }
                }
            }
            &Op::Transpose(a) => {
                if !wants(a) {
                    return;
                }
                let (m, n) = (val(a).shape[0], val(a).shape[1]);
                let s = slot(grads, a, m * n);
                for r in 0..m {
                    for c in 0..n {
                        s[r * n + c] += g[c * m + r];
                    }
                }
            }
            &Op::Reshape(a) => {
                if wants(a) {
                    let n = val(a).len();
                    for (si, gi) in slot(grads, a, n).iter_mut().zip(g) {
                        *si += gi;
                    }
                }
            }
        }
    }
}

/// Central finite-difference gradient of a scalar function of a flat
/// parameter vector. Test and verification helper.
pub fn finite_difference<F>(x: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
