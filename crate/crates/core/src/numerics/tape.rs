//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters are borrowed,
//! never copied, so the tape lives no longer than the model it reads from;
//! gradients are pulled out with [`Tape::grad_of`] before the tape is dropped
//! and the optimizer takes the parameters mutably.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::ops::{gelu, gelu_grad, gemm, layer_norm_rows, silu, silu_grad, softmax_rows};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ScaleBy {
        x: Var,
        s: Var,
        idx: usize,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f32>,
    },
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    Attention {
        qkv: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f32>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    RepeatRows {
        x: Var,
        reps: usize,
    },
    Modulate {
        x: Var,
        shift: Var,
        scale: Var,
        reps: usize,
    },
    MulRows {
        x: Var,
        gate: Var,
        reps: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mse(Var, Var),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f32>>>,
    params: HashMap<*const Tensor, Var>,
    record: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A recording tape: parameters with `requires_grad` become differentiable leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            record: true,
        }
    }

    /// A tape that never tracks gradients, whatever the parameters say.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records an owned input that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records an owned input leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Borrows a parameter. The same tensor always maps to the same leaf, so
    /// gradients from repeated uses accumulate.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        let key = t as *const Tensor;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            requires_grad: t.requires_grad && self.record,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient accumulated for a borrowed parameter, if it was used and trainable.
    pub fn grad_of(&self, t: &Tensor) -> Option<&[f32]> {
        let v = self.params.get(&(t as *const Tensor))?;
        self.grad(*v)
    }

    fn shape2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, format!("expected 2-d tensor, got {:?}", s))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x w + b` for `x: [rows, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, k) = self.shape2(x, "linear")?;
        let (k2, n) = self.shape2(w, "linear")?;
        if k != k2 {
            return Err(Error::shape("linear", format!("[{rows}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != n {
                return Err(Error::shape("linear", format!("bias {} vs {}", bias.len(), n)));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            b.is_some(),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let out = Tensor::new(&[rows, n], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(a, b, op)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Multiplies every element of `x` by the scalar `s[idx]`.
    pub fn scale_by(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let factor = *self
            .value(s)
            .data()
            .get(idx)
            .ok_or_else(|| Error::shape("scale_by", format!("index {idx} out of range")))?;
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy { x, s, idx }, rg))
    }

    /// Per-row layer normalization over the last axis, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if d == 0 || t.shape().is_empty() {
            return Err(Error::shape("layer_norm", "normalized axis has size 0"));
        }
        let (out, inv_std) = layer_norm_rows(t.data(), d, eps);
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(x);
        let inv_std = if rg { inv_std } else { Vec::new() };
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| gelu(v)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| silu(v)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = super::ops::softmax(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Multi-head self-attention from a packed `[batch * len, 3 * d]` projection
    /// whose columns are `[q | k | v]`, each split into `heads` contiguous slices.
    /// Returns `[batch * len, d]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rows, cols) = self.shape2(qkv, "attention")?;
        if batch == 0 || rows % batch != 0 || cols % 3 != 0 || heads == 0 || (cols / 3) % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("[{rows}, {cols}] with batch {batch}, heads {heads}"),
            ));
        }
        let len = rows / batch;
        let d = cols / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * len * len];
        let (mut q, mut k, mut v) = (vec![0.0; len * dh], vec![0.0; len * dh], vec![0.0; len * dh]);
        let mut o = vec![0.0; len * dh];
        for bi in 0..batch {
            for h in 0..heads {
                gather_head(src, cols, bi * len, len, h * dh, dh, &mut q);
                gather_head(src, cols, bi * len, len, d + h * dh, dh, &mut k);
                gather_head(src, cols, bi * len, len, 2 * d + h * dh, dh, &mut v);
                let p = &mut probs[(bi * heads + h) * len * len..(bi * heads + h + 1) * len * len];
                gemm(len, dh, len, &q, false, &k, true, p, false);
                p.iter_mut().for_each(|s| *s *= scale);
                let sm = softmax_rows(p, len);
                p.copy_from_slice(&sm);
                gemm(len, len, dh, p, false, &v, false, &mut o, false);
                scatter_head(&mut out, d, bi * len, len, h * dh, dh, &o, false);
            }
        }
        let rg = self.rg(qkv);
        let out = Tensor::new(&[rows, d], out)?;
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape2(x, "slice_cols")?;
        if start + len > cols {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {cols}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(&[rows, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Repeats each row `reps` times consecutively: `[b, d] -> [b * reps, d]`.
    pub fn repeat_rows(&mut self, x: Var, reps: usize) -> Result<Var> {
        let (rows, d) = self.shape2(x, "repeat_rows")?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * reps * d);
        for r in 0..rows {
            for _ in 0..reps {
                data.extend_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let out = Tensor::new(&[rows * reps, d], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::RepeatRows { x, reps }, rg))
    }

    fn check_grouped(&self, x: Var, g: Var, reps: usize, op: &'static str) -> Result<(usize, usize)> {
        let (rows, d) = self.shape2(x, op)?;
        let (groups, d2) = self.shape2(g, op)?;
        if d != d2 || groups * reps != rows {
            return Err(Error::shape(
                op,
                format!("[{rows}, {d}] against [{groups}, {d2}] x {reps}"),
            ));
        }
        Ok((rows, d))
    }

    /// adaLN modulation `x * (1 + scale) + shift`, where row `r` of `x` uses
    /// row `r / reps` of `shift` and `scale`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var, reps: usize) -> Result<Var> {
        let (rows, d) = self.check_grouped(x, shift, reps, "modulate")?;
        self.check_grouped(x, scale, reps, "modulate")?;
        let (xs, sh, sc) = (self.value(x).data(), self.value(shift).data(), self.value(scale).data());
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let g = r / reps;
            for c in 0..d {
                data[r * d + c] = xs[r * d + c] * (1.0 + sc[g * d + c]) + sh[g * d + c];
            }
        }
        let out = Tensor::new(&[rows, d], data)?;
        let rg = self.rg(x) || self.rg(shift) || self.rg(scale);
        Ok(self.push(out, Op::Modulate { x, shift, scale, reps }, rg))
    }

    /// Row-grouped elementwise product: row `r` of `x` times row `r / reps` of `gate`.
    pub fn mul_rows(&mut self, x: Var, gate: Var, reps: usize) -> Result<Var> {
        let (rows, d) = self.check_grouped(x, gate, reps, "mul_rows")?;
        let (xs, gs) = (self.value(x).data(), self.value(gate).data());
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let g = r / reps;
            for c in 0..d {
                data[r * d + c] = xs[r * d + c] * gs[g * d + c];
            }
        }
        let out = Tensor::new(&[rows, d], data)?;
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(out, Op::MulRows { x, gate, reps }, rg))
    }

    /// Embedding lookup: rows `idx` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.shape2(table, "gather_rows")?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(format!("row {i} out of range for table of {n}")));
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean squared error between two same-shaped tensors, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).numel().max(1);
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = f64::from(x) - f64::from(y);
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s as f32), Op::Mse(a, b), rg))
    }

    /// Populates gradients of `loss` with respect to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.backprop(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, g: &[f32]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| nodes[v.0].value.tensor();
        let needs = |v: Var| nodes[v.0].requires_grad;
        let out = nodes[i].value.tensor();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if needs(a) {
                    let ga = slot(grads, a, m * k);
                    gemm(m, n, k, g, false, val(b).data(), true, ga, true);
                }
                if needs(b) {
                    let gb = slot(grads, b, k * n);
                    gemm(k, m, n, val(a).data(), true, g, false, gb, true);
                }
            }
            &Op::Linear { x, w, b } => {
                let (rows, k) = (val(x).shape()[0], val(x).shape()[1]);
                let n = val(w).shape()[1];
                if needs(x) {
                    let gx = slot(grads, x, rows * k);
                    gemm(rows, n, k, g, false, val(w).data(), true, gx, true);
                }
                if needs(w) {
                    let gw = slot(grads, w, k * n);
                    gemm(k, rows, n, val(x).data(), true, g, false, gw, true);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let gb = slot(grads, b, n);
                    for row in g.chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        axpy(slot(grads, v, g.len()), g, 1.0);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    axpy(slot(grads, a, g.len()), g, 1.0);
                }
                if needs(b) {
                    axpy(slot(grads, b, g.len()), g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let other = val(b).data();
                    for ((acc, gv), o) in slot(grads, a, g.len()).iter_mut().zip(g).zip(other) {
                        *acc += gv * o;
                    }
                }
                if needs(b) {
                    let other = val(a).data();
                    for ((acc, gv), o) in slot(grads, b, g.len()).iter_mut().zip(g).zip(other) {
                        *acc += gv * o;
                    }
                }
            }
            &Op::Scale(x, c) => {
                if needs(x) {
                    axpy(slot(grads, x, g.len()), g, c);
                }
            }
            &Op::ScaleBy { x, s, idx } => {
                if needs(x) {
                    let factor = val(s).data()[idx];
                    axpy(slot(grads, x, g.len()), g, factor);
                }
                if needs(s) {
                    let dot: f64 = g
                        .iter()
                        .zip(val(x).data())
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum();
                    let len = val(s).numel();
                    slot(grads, s, len)[idx] += dot as f32;
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let d = out.last_dim();
                let y = out.data();
                let gx = slot(grads, *x, g.len());
                for (r, &rs) in inv_std.iter().enumerate() {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let mean_g = gr.iter().sum::<f32>() / d as f32;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                    for c in 0..d {
                        gx[r * d + c] += rs * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
            }
            &Op::Gelu(x) => {
                let xs = val(x).data();
                for ((acc, gv), &xv) in slot(grads, x, g.len()).iter_mut().zip(g).zip(xs) {
                    *acc += gv * gelu_grad(xv);
                }
            }
            &Op::Silu(x) => {
                let xs = val(x).data();
                for ((acc, gv), &xv) in slot(grads, x, g.len()).iter_mut().zip(g).zip(xs) {
                    *acc += gv * silu_grad(xv);
                }
            }
            &Op::Softmax(x) => {
                let d = out.last_dim();
                let y = out.data();
                let gx = slot(grads, x, g.len());
                for r in 0..g.len() / d {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        gx[r * d + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            } => {
                let (qkv, batch, heads) = (*qkv, *batch, *heads);
                let src = val(qkv).data();
                let cols = val(qkv).shape()[1];
                let rows = val(qkv).shape()[0];
                let (d, len) = (cols / 3, rows / batch);
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let gq = slot(grads, qkv, rows * cols);
                let mut buf = AttnScratch::new(len, dh);
                for bi in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(bi * heads + h) * len * len..(bi * heads + h + 1) * len * len];
                        buf.backward_head(src, g, gq, p, bi * len, h, d, dh, scale);
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let (rows, cols) = (val(x).shape()[0], val(x).shape()[1]);
                let len = out.shape()[1];
                let gx = slot(grads, x, rows * cols);
                for r in 0..rows {
                    for c in 0..len {
                        gx[r * cols + start + c] += g[r * len + c];
                    }
                }
            }
            &Op::RepeatRows { x, reps } => {
                let d = out.last_dim();
                let gx = slot(grads, x, val(x).numel());
                for (r, row) in g.chunks(d).enumerate() {
                    let dst = r / reps;
                    for (acc, v) in gx[dst * d..(dst + 1) * d].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            &Op::Modulate { x, shift, scale, reps } => {
                let d = out.last_dim();
                let (xs, sc) = (val(x).data(), val(scale).data());
                if needs(x) {
                    let gx = slot(grads, x, g.len());
                    for r in 0..g.len() / d {
                        let grp = r / reps;
                        for c in 0..d {
                            gx[r * d + c] += g[r * d + c] * (1.0 + sc[grp * d + c]);
                        }
                    }
                }
                if needs(scale) {
                    let gs = slot(grads, scale, sc.len());
                    for r in 0..g.len() / d {
                        let grp = r / reps;
                        for c in 0..d {
                            gs[grp * d + c] += g[r * d + c] * xs[r * d + c];
                        }
                    }
                }
                if needs(shift) {
                    let gsh = slot(grads, shift, val(shift).numel());
                    for r in 0..g.len() / d {
                        let grp = r / reps;
                        for c in 0..d {
                            gsh[grp * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            &Op::MulRows { x, gate, reps } => {
                let d = out.last_dim();
                let (xs, gs) = (val(x).data(), val(gate).data());
                if needs(x) {
                    let gx = slot(grads, x, g.len());
                    for r in 0..g.len() / d {
                        let grp = r / reps;
                        for c in 0..d {
                            gx[r * d + c] += g[r * d + c] * gs[grp * d + c];
                        }
                    }
                }
                if needs(gate) {
                    let gg = slot(grads, gate, gs.len());
                    for r in 0..g.len() / d {
                        let grp = r / reps;
                        for c in 0..d {
                            gg[grp * d + c] += g[r * d + c] * xs[r * d + c];
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let d = out.last_dim();
                let gt = slot(grads, *table, val(*table).numel());
                for (row, &i) in g.chunks(d).zip(idx) {
                    for (acc, v) in gt[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            &Op::Sum(x) => {
                let gv = g[0];
                slot(grads, x, val(x).numel()).iter_mut().for_each(|acc| *acc += gv);
            }
            &Op::Mse(a, b) => {
                let n = val(a).numel().max(1) as f32;
                let coef = 2.0 * g[0] / n;
                let (av, bv) = (val(a).data(), val(b).data());
                if needs(a) {
                    for ((acc, x), y) in slot(grads, a, av.len()).iter_mut().zip(av).zip(bv) {
                        *acc += coef * (x - y);
                    }
                }
                if needs(b) {
                    for ((acc, x), y) in slot(grads, b, av.len()).iter_mut().zip(av).zip(bv) {
                        *acc -= coef * (x - y);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(acc: &mut [f32], g: &[f32], c: f32) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += c * v;
    }
}

/// Copies a `[len, dh]` column block starting at (`row0`, `col0`) into `dst`.
fn gather_head(src: &[f32], cols: usize, row0: usize, len: usize, col0: usize, dh: usize, dst: &mut [f32]) {
    for r in 0..len {
        let s = (row0 + r) * cols + col0;
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head(dst: &mut [f32], cols: usize, row0: usize, len: usize, col0: usize, dh: usize, src: &[f32], add: bool) {
    for r in 0..len {
        let o = (row0 + r) * cols + col0;
        let row = &mut dst[o..o + dh];
        if add {
            for (a, v) in row.iter_mut().zip(&src[r * dh..(r + 1) * dh]) {
                *a += v;
            }
        } else {
            row.copy_from_slice(&src[r * dh..(r + 1) * dh]);
        }
    }
}

struct AttnScratch {
    len: usize,
    dh: usize,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    go: Vec<f32>,
    dp: Vec<f32>,
    dq: Vec<f32>,
    dk: Vec<f32>,
    dv: Vec<f32>,
}

impl AttnScratch {
    fn new(len: usize, dh: usize) -> Self {
        let z = || vec![0.0; len * dh];
        Self {
            len,
            dh,
            q: z(),
            k: z(),
            v: z(),
            go: z(),
            dp: vec![0.0; len * len],
            dq: z(),
            dk: z(),
            dv: z(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_head(
        &mut self,
        src: &[f32],
        gout: &[f32],
        gqkv: &mut [f32],
        p: &[f32],
        row0: usize,
        h: usize,
        d: usize,
        dh: usize,
        scale: f32,
    ) {
        let (len, cols) = (self.len, 3 * d);
        debug_assert_eq!(dh, self.dh);
        gather_head(src, cols, row0, len, h * dh, dh, &mut self.q);
        gather_head(src, cols, row0, len, d + h * dh, dh, &mut self.k);
        gather_head(src, cols, row0, len, 2 * d + h * dh, dh, &mut self.v);
        gather_head(gout, d, row0, len, h * dh, dh, &mut self.go);
        // dV = P^T dO, dP = dO V^T
        gemm(len, len, dh, p, true, &self.go, false, &mut self.dv, false);
        gemm(len, dh, len, &self.go, false, &self.v, true, &mut self.dp, false);
        // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(dh) logit scale
        for r in 0..len {
            let pr = &p[r * len..(r + 1) * len];
            let dpr = &mut self.dp[r * len..(r + 1) * len];
            let dot: f32 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
            for (x, &pv) in dpr.iter_mut().zip(pr) {
                *x = pv * (*x - dot) * scale;
            }
        }
        gemm(len, len, dh, &self.dp, false, &self.k, false, &mut self.dq, false);
        gemm(len, len, dh, &self.dp, true, &self.q, false, &mut self.dk, false);
        scatter_head(gqkv, cols, row0, len, h * dh, dh, &self.dq, true);
        scatter_head(gqkv, cols, row0, len, d + h * dh, dh, &self.dk, true);
        scatter_head(gqkv, cols, row0, len, 2 * d + h * dh, dh, &self.dv, true);
    }
}
