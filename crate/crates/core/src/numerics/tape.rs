//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node to the [`Tape`]; node order is therefore a
//! topological order and [`Tape::backward`] walks it once in reverse.
//!
//! Gradient accumulation rule: intermediate gradients live only for the
//! duration of one `backward` call, while gradients of leaves that require
//! them are *added* into a persistent buffer. Calling `backward` twice on the
//! same loss without [`Tape::zero_grad`] therefore yields exactly twice the
//! leaf gradients.

use std::collections::HashMap;

use super::params::ParameterRegistry;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { x: Var, axis: Axis, start: usize },
    Gather { x: Var, rows: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Softmax { x: Var, axis: Axis },
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    CrossEntropy { scores: Var, target: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    bound: HashMap<String, Var>,
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a registry parameter onto the tape, once per name.
    pub fn param(&mut self, registry: &ParameterRegistry, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = registry
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let value = Tensor::new(t.shape().to_vec(), t.values().to_vec())?;
        let v = self.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Adds the gradients of all bound parameters into the registry.
    pub fn accumulate_into(&self, registry: &mut ParameterRegistry) -> Result<()> {
        for (name, &v) in &self.bound {
            if let Some(g) = self.grad(v) {
                registry.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in row.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, values).expect("shape checked"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Hadamard(a, b)))
    }

    /// Adds a `1 x n` (or length-`n`) row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(row).numel() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let rv = self.value(row).values();
        let mut out = self.value(x).values().to_vec();
        for i in 0..m {
            for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *o += r;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let values = t.values().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, values).expect("same shape"), Op::Scale(x, c), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (r0, c0) = self.value(first).dims2()?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            let ragged = match axis {
                Axis::Rows => c != c0,
                Axis::Cols => r != r0,
            };
            if ragged {
                return Err(Error::dim("concat", self.shape(first), self.shape(p)));
            }
            dims.push((r, c));
        }
        let (rows, cols) = match axis {
            Axis::Rows => (dims.iter().map(|d| d.0).sum(), c0),
            Axis::Cols => (r0, dims.iter().map(|d| d.1).sum()),
        };
        let mut out = Vec::with_capacity(rows * cols);
        match axis {
            Axis::Rows => {
                for &p in parts {
                    out.extend_from_slice(self.value(p).values());
                }
            }
            Axis::Cols => {
                for i in 0..rows {
                    for &p in parts {
                        out.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous block of `len` rows or columns starting at `start`.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if len == 0 || start + len > extent {
            return Err(Error::contract(format!(
                "slice [{start}, {}) out of range for extent {extent}",
                start + len
            )));
        }
        let xv = self.value(x);
        let (rows, cols, out) = match axis {
            Axis::Rows => (len, c, xv.values()[start * c..(start + len) * c].to_vec()),
            Axis::Cols => {
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&xv.row_slice(i)[start..start + len]);
                }
                (r, len, out)
            }
        };
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Row lookup; indices may repeat (tiling, embedding lookup).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if rows.is_empty() {
            return Err(Error::contract("gather of zero rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::contract(format!("row {i} out of range for {r} rows")));
            }
            out.extend_from_slice(self.value(x).row_slice(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(rows.len(), c, out)?,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let values = self.value(x).values().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), values)?, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xv = self.value(x).values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(x), rg))
    }

    /// Max-shifted softmax over each row (`Axis::Cols`) or column (`Axis::Rows`).
    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut out = self.value(x).values().to_vec();
        match axis {
            Axis::Cols => out.chunks_mut(c).for_each(softmax_in_place),
            Axis::Rows => {
                for j in 0..c {
                    let mut col: Vec<f64> = (0..r).map(|i| out[i * c + j]).collect();
                    softmax_in_place(&mut col);
                    for (i, v) in col.into_iter().enumerate() {
                        out[i * c + j] = v;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Softmax { x, axis }, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let values = t.values().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, values).expect("same shape"), op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Softmax cross-entropy of a score vector against a target index.
    pub fn cross_entropy(&mut self, scores: Var, target: usize) -> Result<Var> {
        let s = self.value(scores).values();
        if target >= s.len() {
            return Err(Error::contract(format!(
                "target index {target} out of range for {} scores",
                s.len()
            )));
        }
        let (argmax, &max) = s
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        // ln Σ exp(s - max) = ln(1 + rest), kept in log1p form so a dominant
        // target still yields a strictly positive loss.
        let rest: f64 = s
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != argmax)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let loss = (max - s[target]) + rest.ln_1p();
        let rg = self.rg(scores);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { scores, target }, rg))
    }

    /// Backpropagates from a scalar loss; see the module docs for the
    /// accumulation rule.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let node = &self.nodes[idx];
            let out = node.value.values();
            let mut send = |v: Var, delta: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    let acc = self
                        .leaf_grads
                        .entry(idx)
                        .or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a.0].value.dims2()?;
                    let n = self.nodes[b.0].value.dims2()?.1;
                    let av = self.nodes[a.0].value.values();
                    let bv = self.nodes[b.0].value.values();
                    if self.nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                ga[i * k + p] =
                                    g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        send(*a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += aip * gv;
                                }
                            }
                        }
                        send(*b, gb);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.iter().map(|v| -v).collect());
                }
                Op::AddRow(x, row) => {
                    let n = self.nodes[row.0].value.numel();
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(a, d)| *a += d);
                    }
                    send(*x, g);
                    send(*row, gr);
                }
                Op::Hadamard(a, b) => {
                    let av = self.nodes[a.0].value.values();
                    let bv = self.nodes[b.0].value.values();
                    let ga = g.iter().zip(bv).map(|(d, y)| d * y).collect();
                    let gb = g.iter().zip(av).map(|(d, x)| d * x).collect();
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Scale(x, c) => send(*x, g.iter().map(|d| d * c).collect()),
                Op::Concat { parts, axis } => {
                    let (rows, cols) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = self.nodes[p.0].value.dims2()?;
                        let gp = match axis {
                            Axis::Rows => g[offset * cols..(offset + pr) * cols].to_vec(),
                            Axis::Cols => {
                                let mut gp = Vec::with_capacity(pr * pc);
                                for i in 0..rows {
                                    gp.extend_from_slice(
                                        &g[i * cols + offset..i * cols + offset + pc],
                                    );
                                }
                                gp
                            }
                        };
                        offset += match axis {
                            Axis::Rows => pr,
                            Axis::Cols => pc,
                        };
                        send(p, gp);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (r, c) = self.nodes[x.0].value.dims2()?;
                    let mut gx = vec![0.0; r * c];
                    match axis {
                        Axis::Rows => gx[start * c..start * c + g.len()].copy_from_slice(&g),
                        Axis::Cols => {
                            let len = g.len() / r;
                            for i in 0..r {
                                gx[i * c + start..i * c + start + len]
                                    .copy_from_slice(&g[i * len..(i + 1) * len]);
                            }
                        }
                    }
                    send(*x, gx);
                }
                Op::Gather { x, rows } => {
                    let (r, c) = self.nodes[x.0].value.dims2()?;
                    let mut gx = vec![0.0; r * c];
                    for (k, &i) in rows.iter().enumerate() {
                        gx[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(a, d)| *a += d);
                    }
                    send(*x, gx);
                }
                Op::Reshape(x) => send(*x, g),
                Op::Transpose(x) => {
                    let (r, c) = self.nodes[x.0].value.dims2()?;
                    // g is c x r
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g[j * r + i];
                        }
                    }
                    send(*x, gx);
                }
                Op::Softmax { x, axis } => {
                    let (r, c) = node.value.dims2()?;
                    let mut gx = vec![0.0; r * c];
                    match axis {
                        Axis::Cols => {
                            for i in 0..r {
                                let y = &out[i * c..(i + 1) * c];
                                let dy = &g[i * c..(i + 1) * c];
                                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                                for j in 0..c {
                                    gx[i * c + j] = y[j] * (dy[j] - dot);
                                }
                            }
                        }
                        Axis::Rows => {
                            for j in 0..c {
                                let dot: f64 = (0..r).map(|i| out[i * c + j] * g[i * c + j]).sum();
                                for i in 0..r {
                                    gx[i * c + j] = out[i * c + j] * (g[i * c + j] - dot);
                                }
                            }
                        }
                    }
                    send(*x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.iter().zip(out).map(|(d, y)| d * y * (1.0 - y)).collect();
                    send(*x, gx);
                }
                Op::Tanh(x) => {
                    let gx = g.iter().zip(out).map(|(d, y)| d * (1.0 - y * y)).collect();
                    send(*x, gx);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.numel();
                    send(*x, vec![g[0]; n]);
                }
                Op::CrossEntropy { scores, target } => {
                    let mut p = self.nodes[scores.0].value.values().to_vec();
                    softmax_in_place(&mut p);
                    p[*target] -= 1.0;
                    send(*scores, p.into_iter().map(|v| v * g[0]).collect());
                }
            }
        }
        Ok(())
    }
}
