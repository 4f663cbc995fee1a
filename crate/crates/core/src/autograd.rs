//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] records every operation in execution order, so inputs always
//! precede their consumers. [`Graph::backward`] walks the tape once in
//! reverse, accumulating gradients (`+=`) into every node that feeds a
//! gradient-requiring path. A graph is single-use: build a fresh one for
//! each forward pass.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var, plane: usize },
    AvgPool { x: Var, c: usize, h: usize, w: usize, win: usize },
    Upsample { x: Var, c: usize, h: usize, w: usize, f: usize },
    Linear { x: Var, w: Var, b: Option<Var>, batch: usize, n: usize, m: usize },
    Act { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    LinComb { terms: Vec<(Var, f64)> },
    Concat { a: Var, b: Var, rows: usize, na: usize, nb: usize },
    Reshape { x: Var },
    Sum { x: Var },
    SumSquares { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::AvgPool { .. } => "pool2d",
            Op::Upsample { .. } => "upsample",
            Op::Linear { .. } => "dense",
            Op::Act { .. } => "activation",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::LinComb { .. } => "lincomb",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::SumSquares { .. } => "sum_squares",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.push_raw(t, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, true, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` seed with respect to `v`. Nodes that
    /// received no gradient (constants, or off the loss path) report zeros
    /// when they require grad and `None` otherwise.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let n = &self.nodes[v.0];
        n.grad.as_deref()
    }

    /// Gradient as an owned vector, zero-filled when the node was not reached.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        if self.backward_done {
            return Err(Error::State("graph already consumed by backward".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let t = Tensor::new(shape, data)?;
        Ok(self.push_raw(t, requires_grad, op))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::State(format!("unknown variable {}", v.0)));
        }
        Ok(())
    }

    /// Cross-correlation of `x: [C_in, H, W]` with `k: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(k)?;
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] {
            return Err(Error::dim("conv2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        if ks[2] % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size {} must be odd", ks[2])));
        }
        if xs[1] < ks[2] || xs[2] < ks[2] {
            return Err(Error::dim("conv2d", format!("input {xs:?} smaller than kernel {}", ks[2])));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ks[0], ks[2], stride, padding).ok_or_else(|| {
            Error::Config(format!(
                "conv2d output size not exact for input {xs:?}, kernel {}, stride {stride}, padding {padding}",
                ks[2]
            ))
        })?;
        let mut out = vec![0.0; geom.c_out * geom.h_out * geom.w_out];
        kernels::conv2d_forward(&geom, self.value(x).data(), self.value(k).data(), &mut out);
        self.push(&[geom.c_out, geom.h_out, geom.w_out], out, &[x, k], Op::Conv2d { x, k, geom })
    }

    /// Adds a per-channel bias `b: [C]` to `x: [C, H, W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 || bs != [xs[0]] {
            return Err(Error::dim("channel_bias", format!("input {xs:?}, bias {bs:?}")));
        }
        let plane = xs[1] * xs[2];
        let mut out = self.value(x).data().to_vec();
        let bv = self.value(b).data();
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv[c]);
        }
        self.push(&xs, out, &[x, b], Op::ChannelBias { x, b, plane })
    }

    /// Average pooling over non-overlapping `window × window` blocks.
    pub fn pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::dim("pool2d", format!("expected [C,H,W], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::Config(format!("pool window {window} does not divide {h}x{w}")));
        }
        let mut out = vec![0.0; c * (h / window) * (w / window)];
        kernels::avg_pool_forward(c, h, w, window, self.value(x).data(), &mut out);
        self.push(&[c, h / window, w / window], out, &[x], Op::AvgPool { x, c, h, w, win: window })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || factor == 0 {
            return Err(Error::dim("upsample", format!("input {xs:?}, factor {factor}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; c * h * w * factor * factor];
        kernels::upsample_forward(c, h, w, factor, self.value(x).data(), &mut out);
        self.push(&[c, h * factor, w * factor], out, &[x], Op::Upsample { x, c, h, w, f: factor })
    }

    /// `y = W x + b` for `x: [n]` or a row batch `x: [B, n]`; `W: [m, n]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs.len() > 2 || *xs.last().unwrap() != ws[1] {
            return Err(Error::dim("dense", format!("input {xs:?}, weights {ws:?}")));
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(bv) = b {
            if self.shape(bv) != [m] {
                return Err(Error::dim("dense", format!("bias {:?}, expected [{m}]", self.shape(bv))));
            }
        }
        let batch = if xs.len() == 2 { xs[0] } else { 1 };
        let mut out = vec![0.0; batch * m];
        kernels::linear_forward(
            batch,
            n,
            m,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            &mut out,
        );
        let shape = if xs.len() == 2 { vec![batch, m] } else { vec![m] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(&shape, out, &inputs, Op::Linear { x, w, b, batch, n, m })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Activation::Tanh => f64::tanh,
        };
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, &[x], Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        self.push(&shape, out, &[a, b], Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        self.push(&shape, out, &[a, b], Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        self.push(&shape, out, &[a, b], Op::Mul { a, b })
    }

    /// `Σ c_i · x_i` over same-shape operands, evaluated left to right.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Input("lincomb needs at least one term".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &(v, c) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::dim("lincomb", format!("{:?} vs {shape:?}", self.shape(v))));
            }
            kernels::axpy(c, self.value(v).data(), &mut out);
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(&shape, out, &inputs, Op::LinComb { terms: terms.to_vec() })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.lincomb(&[(x, c)])
    }

    /// Concatenates along the last axis; both operands are `[n]` or `[rows, n]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len() && (sa.len() == 1 || (sa.len() == 2 && sa[0] == sb[0]));
        if !ok {
            return Err(Error::dim("concat", format!("{sa:?} vs {sb:?}")));
        }
        let rows = if sa.len() == 2 { sa[0] } else { 1 };
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut out = Vec::with_capacity(rows * (na + nb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for r in 0..rows {
            out.extend_from_slice(&da[r * na..(r + 1) * na]);
            out.extend_from_slice(&db[r * nb..(r + 1) * nb]);
        }
        let shape = if sa.len() == 2 { vec![rows, na + nb] } else { vec![na + nb] };
        self.push(&shape, out, &[a, b], Op::Concat { a, b, rows, na, nb })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).data().to_vec();
        self.push(shape, data, &[x], Op::Reshape { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(&[], vec![s], &[x], Op::Sum { x })
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let s = kernels::dot(d, d);
        self.push(&[], vec![s], &[x], Op::SumSquares { x })
    }

    /// `Σ (a − b)²`.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        self.sum_squares(d)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Propagates `seed · ∂loss/∂node` to every gradient-requiring node.
    pub fn backward_with_seed(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.nodes.iter().all(|n| matches!(n.op, Op::Leaf)) {
            return Err(Error::State("backward called before any forward op was recorded".into()));
        }
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward seed must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![seed]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            self.apply_rule(idx, &op, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn take_buf(&mut self, v: Var) -> Vec<f64> {
        let n = &mut self.nodes[v.0];
        n.grad.take().unwrap_or_else(|| vec![0.0; n.value.len()])
    }

    fn put_buf(&mut self, v: Var, buf: Vec<f64>) {
        self.nodes[v.0].grad = Some(buf);
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&Self, &mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let mut buf = self.take_buf(v);
        f(self, &mut buf);
        self.put_buf(v, buf);
    }

    fn apply_rule(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geom } => {
                self.accumulate_with(x, |s, buf| {
                    kernels::conv2d_backward_input(&geom, g, s.value(k).data(), buf)
                });
                self.accumulate_with(k, |s, buf| {
                    kernels::conv2d_backward_kernel(&geom, g, s.value(x).data(), buf)
                });
            }
            Op::ChannelBias { x, b, plane } => {
                self.accumulate_with(x, |_, buf| kernels::axpy(1.0, g, buf));
                self.accumulate_with(b, |_, buf| {
                    for (c, chunk) in g.chunks(plane).enumerate() {
                        buf[c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::AvgPool { x, c, h, w, win } => {
                self.accumulate_with(x, |_, buf| kernels::avg_pool_backward(c, h, w, win, g, buf));
            }
            Op::Upsample { x, c, h, w, f } => {
                self.accumulate_with(x, |_, buf| kernels::upsample_backward(c, h, w, f, g, buf));
            }
            Op::Linear { x, w, b, batch, n, m } => {
                self.accumulate_with(x, |s, buf| {
                    kernels::linear_backward_input(batch, n, m, g, s.value(w).data(), buf)
                });
                self.accumulate_with(w, |s, buf| {
                    kernels::linear_backward_weight(batch, n, m, g, s.value(x).data(), buf)
                });
                if let Some(b) = b {
                    self.accumulate_with(b, |_, buf| {
                        for row in g.chunks(m) {
                            kernels::axpy(1.0, row, buf);
                        }
                    });
                }
            }
            Op::Act { x, kind } => {
                let y = Var(idx);
                self.accumulate_with(x, |s, buf| {
                    let out = s.value(y).data();
                    match kind {
                        Activation::Relu => {
                            for ((b, gv), o) in buf.iter_mut().zip(g).zip(out) {
                                if *o > 0.0 {
                                    *b += gv;
                                }
                            }
                        }
                        Activation::Tanh => {
                            for ((b, gv), o) in buf.iter_mut().zip(g).zip(out) {
                                *b += gv * (1.0 - o * o);
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate_with(a, |_, buf| kernels::axpy(1.0, g, buf));
                self.accumulate_with(b, |_, buf| kernels::axpy(1.0, g, buf));
            }
            Op::Sub { a, b } => {
                self.accumulate_with(a, |_, buf| kernels::axpy(1.0, g, buf));
                self.accumulate_with(b, |_, buf| kernels::axpy(-1.0, g, buf));
            }
            Op::Mul { a, b } => {
                self.accumulate_with(a, |s, buf| {
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(s.value(b).data()) {
                        *o += gv * bv;
                    }
                });
                self.accumulate_with(b, |s, buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(s.value(a).data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::LinComb { ref terms } => {
                for &(v, c) in terms {
                    self.accumulate_with(v, |_, buf| kernels::axpy(c, g, buf));
                }
            }
            Op::Concat { a, b, rows, na, nb } => {
                self.accumulate_with(a, |_, buf| {
                    for r in 0..rows {
                        kernels::axpy(1.0, &g[r * (na + nb)..r * (na + nb) + na], &mut buf[r * na..(r + 1) * na]);
                    }
                });
                self.accumulate_with(b, |_, buf| {
                    for r in 0..rows {
                        kernels::axpy(
                            1.0,
                            &g[r * (na + nb) + na..(r + 1) * (na + nb)],
                            &mut buf[r * nb..(r + 1) * nb],
                        );
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate_with(x, |_, buf| kernels::axpy(1.0, g, buf));
            }
            Op::Sum { x } => {
                let s = g[0];
                self.accumulate_with(x, |_, buf| buf.iter_mut().for_each(|v| *v += s));
            }
            Op::SumSquares { x } => {
                let s = 2.0 * g[0];
                self.accumulate_with(x, |st, buf| kernels::axpy(s, st.value(x).data(), buf));
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
