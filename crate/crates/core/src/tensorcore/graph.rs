//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that depends on a
//! trainable leaf.

use super::ops::{self, MatView};
use super::tensor::{dims2, dims3, same_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    MulConst(Var, Tensor),
    AddConst(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    EluPlusOne(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    SumLast(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Patches { img: Var, p: usize, s: usize },
    Conv2d { img: Var, w: Var, b: Var, stride: usize },
    MaxPool3 { x: Var, argmax: Vec<usize> },
    GridSample { feat: Var, pos: Var },
    PoissonLoss { o: Var, target: Tensor, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the
    /// differentiated scalar through a trainable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let y = self.value(x).map(f);
        self.push(y, op, &[x], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(y, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(y, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(y, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| x * k, Op::Scale(a, k), "scale")
    }

    fn broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let n = *self.shape(a).last().expect("non-empty shape");
        if self.value(b).len() != n {
            return Err(Error::Dimension(format!(
                "{what}: {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(n)
    }

    /// `a + b` with `b` (length = last axis of `a`) repeated over all rows.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.broadcast_check(a, b, "add_broadcast")?;
        let mut y = self.value(a).clone();
        let bv = self.value(b).data();
        for row in y.data_mut().chunks_mut(n) {
            for (v, w) in row.iter_mut().zip(bv) {
                *v += w;
            }
        }
        self.push(y, Op::AddBroadcast(a, b), &[a, b], "add_broadcast")
    }

    /// `a ⊙ b` with `b` repeated over all rows.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.broadcast_check(a, b, "mul_broadcast")?;
        let mut y = self.value(a).clone();
        let bv = self.value(b).data();
        for row in y.data_mut().chunks_mut(n) {
            for (v, w) in row.iter_mut().zip(bv) {
                *v *= w;
            }
        }
        self.push(y, Op::MulBroadcast(a, b), &[a, b], "mul_broadcast")
    }

    /// Element-wise product with a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Result<Var> {
        let y = self.value(a).zip_map(&k, |x, m| x * m)?;
        self.push(y, Op::MulConst(a, k), &[a], "mul_const")
    }

    /// Addition of a constant tensor (additive masks).
    pub fn add_const(&mut self, a: Var, k: &Tensor) -> Result<Var> {
        let y = self.value(a).zip_map(k, |x, m| x + m)?;
        self.push(y, Op::AddConst(a), &[a], "add_const")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let y = ops::matmul_t(self.value(a), self.value(b), ta, tb)?;
        self.push(y, Op::MatMul { a, b, ta, tb }, &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).transpose2()?;
        self.push(y, Op::Transpose(a), &[a], "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(shape.to_vec())?;
        self.push(y, Op::Reshape(a), &[a], "reshape")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(x), axis)?;
        self.push(y, Op::Softmax { x, axis }, &[x], "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, xhat, rstd) =
            ops::layer_norm_parts(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, ops::gelu_scalar, Op::Gelu(x), "gelu")
    }

    pub fn elu_plus_one(&mut self, x: Var) -> Result<Var> {
        self.unary(x, ops::elu_plus_one_scalar, Op::EluPlusOne(x), "elu_plus_one")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        self.unary(x, f64::ln, Op::Log(x), "log")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, ops::softplus_scalar, Op::Softplus(x), "softplus")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi }, "clamp")
    }

    /// Sum of all elements → shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x], "sum")
    }

    /// Sum over the last axis, which is dropped (a 1-d input yields `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|c| c.iter().sum())
            .collect();
        let new_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let y = Tensor::new(new_shape, data)?;
        self.push(y, Op::SumLast(x), &[x], "sum_last")
    }

    /// Rows `start..start+len` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_rows")?;
        if start + len > r || len == 0 {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{} of {r}",
                start + len
            )));
        }
        let y = Tensor::new(
            vec![len, c],
            self.value(x).data()[start * c..(start + len) * c].to_vec(),
        )?;
        self.push(y, Op::SliceRows { x, start }, &[x], "slice_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = dims2(self.value(parts[0]), "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = dims2(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(Error::Dimension("concat_rows column mismatch".into()));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let y = Tensor::new(vec![rows, c], data)?;
        self.push(y, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Columns `start..start+len` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of {c}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let y = Tensor::new(vec![r, len], data)?;
        self.push(y, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = dims2(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(Error::Dimension("concat_cols row mismatch".into()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let y = Tensor::new(vec![r, total], data)?;
        self.push(y, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn patches(&mut self, img: Var, p: usize, s: usize) -> Result<Var> {
        let y = ops::extract_patches(self.value(img), p, s)?;
        self.push(y, Op::Patches { img, p, s }, &[img], "patches")
    }

    pub fn conv2d(&mut self, img: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(img), self.value(w), self.value(b), stride)?;
        self.push(y, Op::Conv2d { img, w, b, stride }, &[img, w, b], "conv2d")
    }

    pub fn max_pool3(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::max_pool3_parts(self.value(x))?;
        self.push(y, Op::MaxPool3 { x, argmax }, &[x], "max_pool3")
    }

    pub fn grid_sample(&mut self, feat: Var, pos: Var) -> Result<Var> {
        let y = ops::grid_sample(self.value(feat), self.value(pos))?;
        self.push(y, Op::GridSample { feat, pos }, &[feat, pos], "grid_sample")
    }

    /// `Σ (o+ε) − (r+ε)·log(o+ε)` over all elements → `[1]`.
    pub fn poisson_loss(&mut self, o: Var, target: &Tensor, eps: f64) -> Result<Var> {
        same_shape(self.value(o), target, "poisson_loss")?;
        if self.value(o).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("poisson_loss: prediction must be > 0".into()));
        }
        if target.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("poisson_loss: target must be >= 0".into()));
        }
        let total: f64 = self
            .value(o)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&o, &r)| (o + eps) - (r + eps) * (o + eps).ln())
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::PoissonLoss {
                o,
                target: target.clone(),
                eps,
            },
            &[o],
            "poisson_loss",
        )
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl FnOnce() -> Result<Tensor>,
    ) -> Result<()> {
        if self.nodes[v.0].requires_grad {
            let g = f()?;
            self.accumulate(grads, v, g);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, || g.zip_map(vb, |g, b| g * b))?;
                self.accumulate_with(grads, *b, || g.zip_map(va, |g, a| g * a))?;
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|v| v * k)),
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let bshape = self.shape(*b).to_vec();
                self.accumulate_with(grads, *b, || {
                    let n = bshape.iter().product();
                    let mut acc = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (s, v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    Tensor::new(bshape, acc)
                })?;
            }
            Op::MulBroadcast(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = vb.len();
                self.accumulate_with(grads, *a, || {
                    let mut out = g.clone();
                    for row in out.data_mut().chunks_mut(n) {
                        for (v, w) in row.iter_mut().zip(vb.data()) {
                            *v *= w;
                        }
                    }
                    Ok(out)
                })?;
                self.accumulate_with(grads, *b, || {
                    let mut acc = vec![0.0; n];
                    for (grow, arow) in g.data().chunks(n).zip(va.data().chunks(n)) {
                        for k in 0..n {
                            acc[k] += grow[k] * arow[k];
                        }
                    }
                    Tensor::new(vb.shape().to_vec(), acc)
                })?;
            }
            Op::MulConst(a, k) => self.accumulate(grads, *a, g.zip_map(k, |g, m| g * m)?),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ar, ac) = dims2(va, "matmul")?;
                let (br, bc) = dims2(vb, "matmul")?;
                let (gr, gc) = dims2(g, "matmul grad")?;
                self.accumulate_with(grads, *a, || {
                    let gd = g.data();
                    let bd = vb.data();
                    let mut out = vec![0.0; ar * ac];
                    if !ta {
                        // dA = G · op(B)ᵀ
                        let gv = MatView::raw(gd, gr, gc, false);
                        let bv = MatView::raw(bd, br, bc, !tb);
                        ops::gemm_into(gv, bv, &mut out, false);
                    } else {
                        // A stored [k×m]: dA = op(B) · Gᵀ
                        let bv = MatView::raw(bd, br, bc, *tb);
                        let gv = MatView::raw(gd, gr, gc, true);
                        ops::gemm_into(bv, gv, &mut out, false);
                    }
                    Tensor::new(vec![ar, ac], out)
                })?;
                self.accumulate_with(grads, *b, || {
                    let gd = g.data();
                    let ad = va.data();
                    let mut out = vec![0.0; br * bc];
                    if !tb {
                        // dB = op(A)ᵀ · G
                        let av = MatView::raw(ad, ar, ac, !ta);
                        let gv = MatView::raw(gd, gr, gc, false);
                        ops::gemm_into(av, gv, &mut out, false);
                    } else {
                        // B stored [n×k]: dB = Gᵀ · op(A)
                        let gv = MatView::raw(gd, gr, gc, true);
                        let av = MatView::raw(ad, ar, ac, *ta);
                        ops::gemm_into(gv, av, &mut out, false);
                    }
                    Tensor::new(vec![br, bc], out)
                })?;
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose2()?),
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reshape(shape)?);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = ops::axis_split(y.shape(), *axis)?;
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n)
                            .map(|k| yd[base + k * inner] * gd[base + k * inner])
                            .sum();
                        for k in 0..n {
                            let idx = base + k * inner;
                            out[idx] = yd[idx] * (gd[idx] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *y.shape().last().expect("non-empty");
                let gam = self.value(*gamma).data();
                let (gd, hd) = (g.data(), xhat.data());
                self.accumulate_with(grads, *gamma, || {
                    let mut acc = vec![0.0; n];
                    for (grow, hrow) in gd.chunks(n).zip(hd.chunks(n)) {
                        for k in 0..n {
                            acc[k] += grow[k] * hrow[k];
                        }
                    }
                    Tensor::new(self.shape(*gamma).to_vec(), acc)
                })?;
                self.accumulate_with(grads, *beta, || {
                    let mut acc = vec![0.0; n];
                    for grow in gd.chunks(n) {
                        for k in 0..n {
                            acc[k] += grow[k];
                        }
                    }
                    Tensor::new(self.shape(*beta).to_vec(), acc)
                })?;
                self.accumulate_with(grads, *x, || {
                    let mut out = vec![0.0; gd.len()];
                    let nf = n as f64;
                    for (r, &inv) in rstd.iter().enumerate() {
                        let grow = &gd[r * n..(r + 1) * n];
                        let hrow = &hd[r * n..(r + 1) * n];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for k in 0..n {
                            let dh = grow[k] * gam[k];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[k];
                        }
                        for k in 0..n {
                            let dh = grow[k] * gam[k];
                            out[r * n + k] =
                                inv / nf * (nf * dh - sum_dh - hrow[k] * sum_dh_h);
                        }
                    }
                    Tensor::new(y.shape().to_vec(), out)
                })?;
            }
            Op::Tanh(x) => self.accumulate(grads, *x, g.zip_map(y, |g, t| g * (1.0 - t * t))?),
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    g.zip_map(xv, |g, v| if v > 0.0 { g } else { 0.0 })?,
                );
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, g.zip_map(xv, |g, v| g * ops::gelu_grad_scalar(v))?);
            }
            Op::EluPlusOne(x) => {
                let xv = self.value(*x);
                let mut out = g.clone();
                for ((o, &v), &yy) in out.data_mut().iter_mut().zip(xv.data()).zip(y.data()) {
                    if v <= 0.0 {
                        *o *= yy;
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(y, |g, e| g * e)?),
            Op::Log(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, g.zip_map(xv, |g, v| g / v)?);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, g.zip_map(xv, |g, v| g * ops::sigmoid_scalar(v))?);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    grads,
                    *x,
                    g.zip_map(xv, |g, v| if v > lo && v < hi { g } else { 0.0 })?,
                );
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::SumLast(x) => {
                let shape = self.shape(*x).to_vec();
                let n = *shape.last().expect("non-empty");
                let mut out = Vec::with_capacity(shape.iter().product());
                for &gv in g.data() {
                    out.extend(std::iter::repeat(gv).take(n));
                }
                self.accumulate(grads, *x, Tensor::new(shape, out)?);
            }
            Op::SliceRows { x, start } => {
                let shape = self.shape(*x).to_vec();
                let c = shape[1];
                let mut out = Tensor::zeros(shape);
                out.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, out);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let shape = self.shape(p).to_vec();
                    self.accumulate_with(grads, p, || {
                        Tensor::new(shape, g.data()[offset..offset + n].to_vec())
                    })?;
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let shape = self.shape(*x).to_vec();
                let (r, c) = (shape[0], shape[1]);
                let len = g.dim(1);
                let mut out = Tensor::zeros(shape);
                for i in 0..r {
                    out.data_mut()[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, out);
            }
            Op::ConcatCols(parts) => {
                let total = g.dim(1);
                let rows = g.dim(0);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate_with(grads, p, || {
                        let mut data = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            data.extend_from_slice(
                                &g.data()[i * total + offset..i * total + offset + w],
                            );
                        }
                        Tensor::new(vec![rows, w], data)
                    })?;
                    offset += w;
                }
            }
            Op::Patches { img, p, s } => {
                let dims = dims3(self.value(*img), "patches")?;
                self.accumulate_with(grads, *img, || {
                    Tensor::new(vec![dims.0, dims.1, dims.2], ops::scatter_patches(g.data(), dims, *p, *s))
                })?;
            }
            Op::Conv2d { img, w, b, stride } => {
                self.conv2d_backward(*img, *w, *b, *stride, g, grads)?;
            }
            Op::MaxPool3 { x, argmax } => {
                let mut out = Tensor::zeros(self.shape(*x).to_vec());
                for (o, &src) in argmax.iter().enumerate() {
                    out.data_mut()[src] += g.data()[o];
                }
                self.accumulate(grads, *x, out);
            }
            Op::GridSample { feat, pos } => self.grid_sample_backward(*feat, *pos, g, grads)?,
            Op::PoissonLoss { o, target, eps } => {
                let ov = self.value(*o);
                let k = g.item();
                let eps = *eps;
                self.accumulate(
                    grads,
                    *o,
                    ov.zip_map(target, |o, r| k * (1.0 - (r + eps) / (o + eps)))?,
                );
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        img: Var,
        w: Var,
        b: Var,
        stride: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (c, h, wd) = dims3(self.value(img), "conv2d")?;
        let ws = self.shape(w).to_vec();
        let (d, p) = (ws[0], ws[2]);
        let (gh, gw) = (g.dim(1), g.dim(2));
        let gd = g.data();
        self.accumulate_with(grads, b, || {
            let sums = (0..d)
                .map(|o| gd[o * gh * gw..(o + 1) * gh * gw].iter().sum())
                .collect();
            Tensor::new(vec![d], sums)
        })?;
        let x = self.value(img).data();
        self.accumulate_with(grads, w, || {
            let mut out = vec![0.0; d * c * p * p];
            for o in 0..d {
                for i in 0..gh {
                    for j in 0..gw {
                        let go = gd[(o * gh + i) * gw + j];
                        for ch in 0..c {
                            for dy in 0..p {
                                let xrow = &x[ch * h * wd + (i * stride + dy) * wd + j * stride..][..p];
                                let krow = &mut out[((o * c + ch) * p + dy) * p..][..p];
                                for dx in 0..p {
                                    krow[dx] += go * xrow[dx];
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(ws.clone(), out)
        })?;
        let k = self.value(w).data();
        self.accumulate_with(grads, img, || {
            let mut out = vec![0.0; c * h * wd];
            for o in 0..d {
                for i in 0..gh {
                    for j in 0..gw {
                        let go = gd[(o * gh + i) * gw + j];
                        for ch in 0..c {
                            for dy in 0..p {
                                let base = ch * h * wd + (i * stride + dy) * wd + j * stride;
                                let krow = &k[((o * c + ch) * p + dy) * p..][..p];
                                for dx in 0..p {
                                    out[base + dx] += go * krow[dx];
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![c, h, wd], out)
        })
    }

    fn grid_sample_backward(
        &self,
        feat: Var,
        pos: Var,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (d, h, w) = dims3(self.value(feat), "grid_sample")?;
        let pv = self.value(pos);
        let n = pv.dim(0);
        let fd = self.value(feat).data();
        let gd = g.data();
        let corners: Vec<_> = (0..n)
            .map(|i| {
                (
                    ops::bilinear_axis(ops::normalized_to_pixel(pv.get(&[i, 0]), w), w),
                    ops::bilinear_axis(ops::normalized_to_pixel(pv.get(&[i, 1]), h), h),
                )
            })
            .collect();
        self.accumulate_with(grads, feat, || {
            let mut out = vec![0.0; d * h * w];
            for (i, &((x0, x1, wx, _), (y0, y1, wy, _))) in corners.iter().enumerate() {
                for k in 0..d {
                    let gv = gd[i * d + k];
                    let m = &mut out[k * h * w..(k + 1) * h * w];
                    m[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                    m[y0 * w + x1] += gv * (1.0 - wy) * wx;
                    m[y1 * w + x0] += gv * wy * (1.0 - wx);
                    m[y1 * w + x1] += gv * wy * wx;
                }
            }
            Tensor::new(vec![d, h, w], out)
        })?;
        self.accumulate_with(grads, pos, || {
            let mut out = vec![0.0; n * 2];
            for (i, &((x0, x1, wx, in_x), (y0, y1, wy, in_y))) in corners.iter().enumerate() {
                let mut dpx = 0.0;
                let mut dpy = 0.0;
                for k in 0..d {
                    let gv = gd[i * d + k];
                    let m = &fd[k * h * w..(k + 1) * h * w];
                    let (f00, f01) = (m[y0 * w + x0], m[y0 * w + x1]);
                    let (f10, f11) = (m[y1 * w + x0], m[y1 * w + x1]);
                    dpx += gv * ((1.0 - wy) * (f01 - f00) + wy * (f11 - f10));
                    dpy += gv * ((1.0 - wx) * (f10 - f00) + wx * (f11 - f01));
                }
                // d(pixel)/d(normalised) = n/2
                if in_x {
                    out[i * 2] = dpx * w as f64 / 2.0;
                }
                if in_y {
                    out[i * 2 + 1] = dpy * h as f64 / 2.0;
                }
            }
            Tensor::new(vec![n, 2], out)
        })
    }
}
