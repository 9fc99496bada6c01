//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Node values and gradients
//! are kept in `f64` even though parameters are stored as `f32` tensors, so
//! central-difference checks stay meaningful at 1e-4 relative error.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Tape::backward`] is a single reverse sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{axis_layout, softmax_f64, Tensor};

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[m×n] + [m×1]`, the column broadcast over `n`.
    AddColumn(Var, Var),
    /// `[m×n] ⊙ [m×1]`, the column broadcast over `n`.
    MulColumn(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    Softmax { src: Var, axis: usize },
    Gelu(Var),
    /// Zero-mean, unit-variance over each column (no affine).
    NormalizeColumnsStd { src: Var, rstd: Vec<f64> },
    /// Divides each column by `max(‖col‖, eps)`.
    NormalizeColumnsL2 { src: Var, norms: Vec<f64>, eps: f64 },
    Sum(Var),
    /// `ln(max(x, floor))`.
    LnClamped { src: Var, floor: f64 },
    /// `sqrt(x)` with the derivative guarded at `eps`.
    Sqrt { src: Var, eps: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; nodes the output does not depend on get zeros.
    pub fn wrt(&self, var: Var) -> Tensor {
        let dims = self.dims[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(dims, g.iter().map(|&v| v as f32).collect())
                .expect("gradient shape matches node"),
            None => Tensor::zeros(dims),
        }
    }

    pub fn wrt_f64(&self, var: Var) -> Vec<f64> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.dims[var.0].iter().product()],
        }
    }
}

fn dims2(dims: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match *dims {
        [m, n] => Ok((m, n)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {dims:?}"))),
    }
}

fn matmul_f64(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for (r, &bv) in row.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                *r += av * bv;
            }
        }
    }
    out
}

fn transpose_f64(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_K * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = math::tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
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

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool, name: &'static str) -> Result<Var> {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        if cfg!(debug_assertions) && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { dims, value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| v as f64).collect();
        self.nodes.push(Node { dims: t.dims().to_vec(), value, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input; gradients flow back to it.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].tracked = true;
        v
    }

    /// Leaf from raw `f64` values, tracked or not.
    pub fn leaf_f64(&mut self, dims: &[usize], value: Vec<f64>, tracked: bool) -> Result<Var> {
        if dims.iter().product::<usize>() != value.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("leaf", format!("dims {dims:?} for {} values", value.len())));
        }
        self.push(dims.to_vec(), value, Op::Leaf, tracked, "leaf")
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn value_f64(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Node value rounded to `f32`.
    pub fn value(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.dims.clone(), node.value.iter().map(|&x| x as f32).collect())
            .expect("node shape is valid")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(Error::contract(format!("expected a scalar, got dims {:?}", node.dims)));
        }
        Ok(node.value[0])
    }

    fn same_dims(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_dims(a, b, name)?;
        let value = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(&x, &y)| f(x, y)).collect();
        let tracked = self.tracked(&[a, b]);
        self.push(self.dims(a).to_vec(), value, op, tracked, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&x| x * factor).collect();
        let tracked = self.tracked(&[a]);
        self.push(self.dims(a).to_vec(), value, Op::Scale(a, factor), tracked, "scale")
    }

    /// Sums a non-empty list of same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::contract("add_all needs at least one term"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    fn column_pair(&self, a: Var, col: Var, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = dims2(self.dims(a), op)?;
        if self.dims(col) != [m, 1] {
            return Err(Error::shape(op, format!("column {:?} for matrix {:?}", self.dims(col), self.dims(a))));
        }
        Ok((m, n))
    }

    /// Adds the `[m×1]` column `col` to every column of `a`.
    pub fn add_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.column_pair(a, col, "add_column")?;
        let (av, cv) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        let value = (0..m * n).map(|i| av[i] + cv[i / n]).collect();
        let tracked = self.tracked(&[a, col]);
        self.push(vec![m, n], value, Op::AddColumn(a, col), tracked, "add_column")
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.column_pair(a, col, "mul_column")?;
        let (av, cv) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        let value = (0..m * n).map(|i| av[i] * cv[i / n]).collect();
        let tracked = self.tracked(&[a, col]);
        self.push(vec![m, n], value, Op::MulColumn(a, col), tracked, "mul_column")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.dims(a), "matmul")?;
        let (k2, p) = dims2(self.dims(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let value = matmul_f64(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, p);
        let tracked = self.tracked(&[a, b]);
        self.push(vec![m, p], value, Op::MatMul(a, b), tracked, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.dims(a), "transpose")?;
        let value = transpose_f64(&self.nodes[a.0].value, m, n);
        let tracked = self.tracked(&[a]);
        self.push(vec![n, m], value, Op::Transpose(a), tracked, "transpose")
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        if dims.iter().product::<usize>() != self.nodes[a.0].value.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", format!("{:?} -> {dims:?}", self.dims(a))));
        }
        let value = self.nodes[a.0].value.clone();
        let tracked = self.tracked(&[a]);
        self.push(dims.to_vec(), value, Op::Reshape(a), tracked, "reshape")
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = dims2(self.dims(a), "slice_rows")?;
        if count == 0 || start + count > m {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {m}", start + count)));
        }
        let value = self.nodes[a.0].value[start * n..(start + count) * n].to_vec();
        let tracked = self.tracked(&[a]);
        self.push(vec![count, n], value, Op::SliceRows { src: a, start }, tracked, "slice_rows")
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, n) = dims2(self.dims(first), "concat_rows")?;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (m, pn) = dims2(self.dims(p), "concat_rows")?;
            if pn != n {
                return Err(Error::shape("concat_rows", format!("{pn} columns, expected {n}")));
            }
            rows += m;
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let tracked = self.tracked(parts);
        self.push(vec![rows, n], value, Op::ConcatRows(parts.to_vec()), tracked, "concat_rows")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if axis >= dims.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for dims {dims:?}")));
        }
        let value = softmax_f64(&self.nodes[a.0].value, &dims, axis);
        let tracked = self.tracked(&[a]);
        self.push(dims, value, Op::Softmax { src: a, axis }, tracked, "softmax")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&x| gelu(x)).collect();
        let tracked = self.tracked(&[a]);
        self.push(self.dims(a).to_vec(), value, Op::Gelu(a), tracked, "gelu")
    }

    /// Standardizes every column of a matrix over its rows (layer norm
    /// without affine parameters when tokens are columns).
    pub fn normalize_columns_std(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = dims2(self.dims(a), "normalize_columns_std")?;
        let x = &self.nodes[a.0].value;
        let mut value = vec![0.0; m * n];
        let mut rstd = vec![0.0; n];
        for j in 0..n {
            let mean = (0..m).map(|i| x[i * n + j]).sum::<f64>() / m as f64;
            let var = (0..m).map(|i| (x[i * n + j] - mean) * (x[i * n + j] - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / math::sqrt(var + eps);
            rstd[j] = r;
            for i in 0..m {
                value[i * n + j] = (x[i * n + j] - mean) * r;
            }
        }
        let tracked = self.tracked(&[a]);
        self.push(vec![m, n], value, Op::NormalizeColumnsStd { src: a, rstd }, tracked, "normalize_columns_std")
    }

    /// Scales every column to unit L2 norm; columns with norm below `eps` are
    /// divided by `eps` instead.
    pub fn normalize_columns_l2(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = dims2(self.dims(a), "normalize_columns_l2")?;
        let x = &self.nodes[a.0].value;
        let norms: Vec<f64> = (0..n)
            .map(|j| math::sqrt((0..m).map(|i| x[i * n + j] * x[i * n + j]).sum::<f64>()))
            .collect();
        let value = (0..m * n).map(|i| x[i] / norms[i % n].max(eps)).collect();
        let tracked = self.tracked(&[a]);
        self.push(vec![m, n], value, Op::NormalizeColumnsL2 { src: a, norms, eps }, tracked, "normalize_columns_l2")
    }

    /// Sum of all elements as a rank-0 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = vec![self.nodes[a.0].value.iter().sum()];
        let tracked = self.tracked(&[a]);
        self.push(Vec::new(), value, Op::Sum(a), tracked, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&x| math::ln(x.max(floor))).collect();
        let tracked = self.tracked(&[a]);
        self.push(self.dims(a).to_vec(), value, Op::LnClamped { src: a, floor }, tracked, "ln_clamped")
    }

    /// Elementwise square root of a non-negative node.
    pub fn sqrt(&mut self, a: Var, eps: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&x| math::sqrt(x.max(0.0))).collect();
        let tracked = self.tracked(&[a]);
        self.push(self.dims(a).to_vec(), value, Op::Sqrt { src: a, eps }, tracked, "sqrt")
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got dims {:?}",
                self.nodes[output.0].dims
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let dims = self.nodes.iter().map(|n| n.dims.clone()).collect();
        Ok(Gradients { grads, dims })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| add_into(acc, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| acc.iter_mut().zip(g).for_each(|(s, &d)| *s -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, |acc| {
                    acc.iter_mut().zip(g).zip(bv).for_each(|((s, &d), &y)| *s += d * y)
                });
                self.accumulate(grads, *b, |acc| {
                    acc.iter_mut().zip(g).zip(av).for_each(|((s, &d), &x)| *s += d * x)
                });
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, |acc| acc.iter_mut().zip(g).for_each(|(s, &d)| *s += factor * d));
            }
            Op::AddColumn(a, col) => {
                let n = node.dims[1];
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *col, |acc| {
                    for (i, &d) in g.iter().enumerate() {
                        acc[i / n] += d;
                    }
                });
            }
            Op::MulColumn(a, col) => {
                let n = node.dims[1];
                let (av, cv) = (val(*a), val(*col));
                self.accumulate(grads, *a, |acc| {
                    for (i, &d) in g.iter().enumerate() {
                        acc[i] += d * cv[i / n];
                    }
                });
                self.accumulate(grads, *col, |acc| {
                    for (i, &d) in g.iter().enumerate() {
                        acc[i / n] += d * av[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].dims[0], self.nodes[a.0].dims[1]);
                let p = self.nodes[b.0].dims[1];
                if self.nodes[a.0].tracked {
                    let bt = transpose_f64(val(*b), k, p);
                    let ga = matmul_f64(g, &bt, m, p, k);
                    self.accumulate(grads, *a, |acc| add_into(acc, &ga));
                }
                if self.nodes[b.0].tracked {
                    let at = transpose_f64(val(*a), m, k);
                    let gb = matmul_f64(&at, g, k, m, p);
                    self.accumulate(grads, *b, |acc| add_into(acc, &gb));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.dims[0], node.dims[1]);
                let gt = transpose_f64(g, m, n);
                self.accumulate(grads, *a, |acc| add_into(acc, &gt));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |acc| add_into(acc, g)),
            Op::SliceRows { src, start } => {
                let n = node.dims[1];
                self.accumulate(grads, *src, |acc| add_into(&mut acc[start * n..start * n + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.accumulate(grads, p, |acc| add_into(acc, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Softmax { src, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_layout(&node.dims, *axis);
                self.accumulate(grads, *src, |acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                acc[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, |acc| {
                    acc.iter_mut().zip(g).zip(x).for_each(|((s, &d), &xv)| *s += d * gelu_grad(xv))
                });
            }
            Op::NormalizeColumnsStd { src, rstd } => {
                let (m, n) = (node.dims[0], node.dims[1]);
                let xhat = &node.value;
                self.accumulate(grads, *src, |acc| {
                    for j in 0..n {
                        let sum_g: f64 = (0..m).map(|i| g[i * n + j]).sum();
                        let sum_gx: f64 = (0..m).map(|i| g[i * n + j] * xhat[i * n + j]).sum();
                        for i in 0..m {
                            let k = i * n + j;
                            acc[k] += rstd[j] / m as f64 * (m as f64 * g[k] - sum_g - xhat[k] * sum_gx);
                        }
                    }
                });
            }
            Op::NormalizeColumnsL2 { src, norms, eps } => {
                let (m, n) = (node.dims[0], node.dims[1]);
                let y = &node.value;
                self.accumulate(grads, *src, |acc| {
                    for j in 0..n {
                        if norms[j] > *eps {
                            let yg: f64 = (0..m).map(|i| y[i * n + j] * g[i * n + j]).sum();
                            for i in 0..m {
                                let k = i * n + j;
                                acc[k] += (g[k] - y[k] * yg) / norms[j];
                            }
                        } else {
                            for i in 0..m {
                                acc[i * n + j] += g[i * n + j] / eps;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let d = g[0];
                self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|s| *s += d));
            }
            Op::LnClamped { src, floor } => {
                let x = val(*src);
                self.accumulate(grads, *src, |acc| {
                    for ((s, &d), &xv) in acc.iter_mut().zip(g).zip(x) {
                        if xv > *floor {
                            *s += d / xv;
                        }
                    }
                });
            }
            Op::Sqrt { src, eps } => {
                let y = &node.value;
                self.accumulate(grads, *src, |acc| {
                    for ((s, &d), &yv) in acc.iter_mut().zip(g).zip(y) {
                        *s += d * 0.5 / yv.max(*eps);
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[target.0];
        if !node.tracked {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
}

/// Largest relative discrepancy between the tape gradient of `f` at `x` and a
/// central difference with the given step:
/// `max_i |autodiff_i - fd_i| / max(|fd_i|, 1e-8)`.
///
/// `f` receives a fresh tape and the node holding `x`, and must return a
/// scalar node.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let dims = x.dims().to_vec();

    let mut tape = Tape::new();
    let input = tape.leaf_f64(&dims, base.clone(), true)?;
    let out = f(&mut tape, input)?;
    let analytic = tape.backward(out)?.wrt_f64(input);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.leaf_f64(&dims, values, false)?;
        let out = f(&mut tape, input)?;
        tape.scalar(out)
    };

    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = math::abs(analytic[i] - numeric) / math::abs(numeric).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
