//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Node ids are handed
//! out as [`Var`]s and always refer to earlier nodes, so the tape is in
//! topological order by construction and [`Graph::backward`] is a single
//! reverse sweep.
//!
//! Values are stored in `T` but every op computes in `f64`. Reductions and
//! matrix products accumulate in `f64` as well.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Floor applied under the square root of pooled variances.
pub const SQRT_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Relu,
    Log,
    Exp,
}

/// How the right operand of a binary op is expanded to the left operand's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// One-element right operand.
    Scalar,
    /// Vector matching the trailing dimension, repeated over rows.
    Row,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryOp, a: usize, b: usize, bcast: Broadcast },
    AddScalar { a: usize },
    Scale { a: usize, c: f64 },
    Unary { kind: UnaryOp, a: usize },
    Sqrt { a: usize, floor: f64 },
    MatMul { a: usize, b: usize, r: usize, c: usize, k: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    MeanFrames { a: usize },
    VarFrames { a: usize },
    Concat { a: usize, b: usize },
    Stack { parts: Vec<usize> },
    Reshape { a: usize },
    ScaleRows { x: usize, w: usize },
    Row { a: usize, i: usize },
    Sum { a: usize },
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn dim_err(msg: alloc::string::String) -> Error {
    Error::Dimension(msg)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or_else(|| Error::Contract(format!("variable {} does not belong to this graph", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|n| n.value.grad())
    }

    /// Resets the gradient buffers of all trainable leaves.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if matches!(n.op, Op::Leaf) {
                n.value.zero_grad();
            }
        }
    }

    /// Adds a leaf. Its `requires_grad` flag decides whether it receives gradients.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let t = if t.requires_grad() { t } else { t.trainable() };
        self.leaf(t)
    }

    /// Adds a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, dims: &[usize], data: Vec<f64>, op: Op, inputs: &[usize]) -> Result<Var> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{:?} produced {} at index {}", op_name(&op), data[bad], bad)));
        }
        let value = Tensor::from_vec(dims, data.into_iter().map(T::from_f64).collect())?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn vals(&self, v: Var) -> Vec<f64> {
        self.nodes[v.0].value.to_f64_vec()
    }

    fn broadcast_kind(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if sb.rank() == 1 && sa.rank() >= 2 && sa.last() == sb.numel() {
            Ok(Broadcast::Row)
        } else {
            Err(dim_err(format!("cannot broadcast {} against {}", sb, sa)))
        }
    }

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_kind(a, b)?;
        let (av, bv) = (self.vals(a), self.vals(b));
        let width = bv.len();
        let dims = self.shape(a);
        let mut out = Vec::with_capacity(av.len());
        for (i, x) in av.iter().enumerate() {
            let y = match bcast {
                Broadcast::Same => bv[i],
                Broadcast::Scalar => bv[0],
                Broadcast::Row => bv[i % width],
            };
            out.push(match kind {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => {
                    if y == 0.0 {
                        return Err(Error::Domain(format!("division by zero at index {}", i)));
                    }
                    x / y
                }
            });
        }
        self.push(dims.dims(), out, Op::Binary { kind, a: a.0, b: b.0, bcast }, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.node(a)?;
        let out = self.vals(a).into_iter().map(|x| x + c).collect();
        let dims = self.shape(a);
        self.push(dims.dims(), out, Op::AddScalar { a: a.0 }, &[a.0])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.node(a)?;
        let out = self.vals(a).into_iter().map(|x| x * c).collect();
        let dims = self.shape(a);
        self.push(dims.dims(), out, Op::Scale { a: a.0, c }, &[a.0])
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var> {
        self.node(a)?;
        let mut out = Vec::with_capacity(self.value(a).numel());
        for (i, x) in self.vals(a).into_iter().enumerate() {
            out.push(match kind {
                UnaryOp::Tanh => libm::tanh(x),
                UnaryOp::Relu => x.max(0.0),
                UnaryOp::Exp => libm::exp(x),
                UnaryOp::Log => {
                    if x <= 0.0 {
                        return Err(Error::Domain(format!("log of {} at index {}", x, i)));
                    }
                    libm::log(x)
                }
            });
        }
        let dims = self.shape(a);
        self.push(dims.dims(), out, Op::Unary { kind, a: a.0 }, &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    /// Plain square root; negative inputs are a domain error.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.sqrt_floored(a, 0.0)
    }

    /// `sqrt(max(x, floor))`. The gradient is zero wherever `x <= floor`.
    pub fn sqrt_floored(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.node(a)?;
        let mut out = Vec::with_capacity(self.value(a).numel());
        for (i, x) in self.vals(a).into_iter().enumerate() {
            if floor == 0.0 && x < 0.0 {
                return Err(Error::Domain(format!("sqrt of {} at index {}", x, i)));
            }
            out.push(libm::sqrt(x.max(floor)));
        }
        let dims = self.shape(a);
        self.push(dims.dims(), out, Op::Sqrt { a: a.0, floor }, &[a.0])
    }

    /// `[r×c] · [c×k] -> [r×k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa.rank() != 2 || sb.rank() != 2 {
            return Err(dim_err(format!("matmul needs matrices, got {} and {}", sa, sb)));
        }
        let (r, c, c2, k) = (sa.dims()[0], sa.dims()[1], sb.dims()[0], sb.dims()[1]);
        if c != c2 {
            return Err(dim_err(format!("matmul inner dims differ: {} vs {}", sa, sb)));
        }
        let (av, bv) = (self.vals(a), self.vals(b));
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            let row = &mut out[i * k..(i + 1) * k];
            for p in 0..c {
                let x = av[i * c + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * k..(p + 1) * k];
                for (o, y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push(&[r, k], out, Op::MatMul { a: a.0, b: b.0, r, c, k }, &[a.0, b.0])
    }

    fn last_axis(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.node(a)?.value.shape();
        if s.rank() == 0 || s.rank() > 2 || s.numel() == 0 {
            return Err(dim_err(format!("{} needs a non-empty vector or matrix, got {}", what, s)));
        }
        let n = s.last();
        Ok((s.numel() / n, n))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.last_axis(a, "softmax")?;
        let v = self.vals(a);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let x = &v[r * n..(r + 1) * n];
            let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, xi) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = libm::exp(xi - mx);
                z += *o;
            }
            out[r * n..(r + 1) * n].iter_mut().for_each(|o| *o /= z);
        }
        let dims = self.shape(a);
        self.push(dims.dims(), out, Op::Softmax { a: a.0 }, &[a.0])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.last_axis(a, "log_softmax")?;
        let v = self.vals(a);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let x = &v[r * n..(r + 1) * n];
            let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(x.iter().map(|xi| libm::exp(xi - mx)).sum::<f64>());
            for (o, xi) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = xi - lse;
            }
        }
        let dims = self.shape(a);
        self.push(dims.dims(), out, Op::LogSoftmax { a: a.0 }, &[a.0])
    }

    fn frames(&self, a: Var) -> Result<(usize, usize)> {
        let s = self.node(a)?.value.shape();
        if s.rank() != 2 {
            return Err(dim_err(format!("frame reduction needs [m×d], got {}", s)));
        }
        let (m, d) = (s.dims()[0], s.dims()[1]);
        if m == 0 {
            return Err(dim_err("frame reduction over zero frames".into()));
        }
        Ok((m, d))
    }

    fn frame_means(v: &[f64], m: usize, d: usize) -> Vec<f64> {
        let mut mean = vec![0.0; d];
        for t in 0..m {
            for (acc, x) in mean.iter_mut().zip(&v[t * d..(t + 1) * d]) {
                *acc += x;
            }
        }
        mean.iter_mut().for_each(|x| *x /= m as f64);
        mean
    }

    /// Mean over frames: `[m×d] -> [d]`.
    pub fn mean_frames(&mut self, a: Var) -> Result<Var> {
        let (m, d) = self.frames(a)?;
        let mean = Self::frame_means(&self.vals(a), m, d);
        self.push(&[d], mean, Op::MeanFrames { a: a.0 }, &[a.0])
    }

    /// Population variance over frames (divisor `m`): `[m×d] -> [d]`.
    pub fn var_frames(&mut self, a: Var) -> Result<Var> {
        let (m, d) = self.frames(a)?;
        let v = self.vals(a);
        let mean = Self::frame_means(&v, m, d);
        let mut var = vec![0.0; d];
        for t in 0..m {
            for j in 0..d {
                let e = v[t * d + j] - mean[j];
                var[j] += e * e;
            }
        }
        var.iter_mut().for_each(|x| *x /= m as f64);
        self.push(&[d], var, Op::VarFrames { a: a.0 }, &[a.0])
    }

    /// Concatenates two vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa.rank() != 1 || sb.rank() != 1 {
            return Err(dim_err(format!("concat needs vectors, got {} and {}", sa, sb)));
        }
        let mut out = self.vals(a);
        out.extend(self.vals(b));
        let n = out.len();
        self.push(&[n], out, Op::Concat { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err("stack of zero rows".into()));
        }
        let width = self.node(parts[0])?.value.numel();
        let mut out = Vec::with_capacity(width * parts.len());
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s.rank() != 1 || s.numel() != width {
                return Err(dim_err(format!("stack expects vectors of length {}, got {}", width, s)));
            }
            out.extend(self.vals(p));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(&[parts.len(), width], out, Op::Stack { parts: ids.clone() }, &ids)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let s = self.node(a)?.value.shape();
        let target = Shape::new(dims)?;
        if target.numel() != s.numel() {
            return Err(dim_err(format!("cannot reshape {} into {:?}", s, dims)));
        }
        let out = self.vals(a);
        self.push(dims, out, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// Multiplies row `i` of `x: [m×d]` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.node(x)?.value.shape(), self.node(w)?.value.shape());
        if sx.rank() != 2 || sw.rank() != 1 || sw.numel() != sx.dims()[0] {
            return Err(dim_err(format!("scale_rows: {} rows against weights {}", sx, sw)));
        }
        let d = sx.dims()[1];
        let (xv, wv) = (self.vals(x), self.vals(w));
        let out = xv.iter().enumerate().map(|(i, v)| v * wv[i / d]).collect();
        self.push(sx.dims(), out, Op::ScaleRows { x: x.0, w: w.0 }, &[x.0, w.0])
    }

    /// Row `i` of a matrix (an embedding lookup).
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let row = self.node(a)?.value.row(i)?;
        let n = row.numel();
        self.push(&[n], row.to_f64_vec(), Op::Row { a: a.0, i }, &[a.0])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.node(a)?;
        let s = self.vals(a).iter().sum();
        self.push(&[], vec![s], Op::Sum { a: a.0 }, &[a.0])
    }

    /// Inverted dropout. `rng == None` is eval mode and returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {} not in [0, 1)", rate)));
        }
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(x),
        };
        let shape = self.node(x)?.value.shape();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<T> = (0..shape.numel()).map(|_| T::from_f64(if rng.random::<f64>() < rate { 0.0 } else { keep })).collect();
        let m = self.constant(Tensor::with_shape(shape, mask)?);
        self.mul(x, m)
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Gradients are added into the buffers of trainable leaves; calling this
    /// twice without [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.node(loss)?.value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {}", self.shape(loss))));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                self.nodes[id].value.accumulate_grad(&g);
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.backprop(id, &op, &g, &mut adj);
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<f64>>], to: usize, delta: Vec<f64>) {
        if !self.nodes[to].needs_grad {
            return;
        }
        match adj[to].as_mut() {
            Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            None => adj[to] = Some(delta),
        }
    }

    fn backprop(&self, id: usize, op: &Op, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[id].value;
        match *op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let av = self.nodes[a].value.to_f64_vec();
                let bv = self.nodes[b].value.to_f64_vec();
                let width = bv.len();
                let bidx = |i: usize| match bcast {
                    Broadcast::Same => i,
                    Broadcast::Scalar => 0,
                    Broadcast::Row => i % width,
                };
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for (i, gi) in g.iter().enumerate() {
                    let (x, y) = (av[i], bv[bidx(i)]);
                    let (da, db) = match kind {
                        BinaryOp::Add => (*gi, *gi),
                        BinaryOp::Sub => (*gi, -gi),
                        BinaryOp::Mul => (gi * y, gi * x),
                        BinaryOp::Div => (gi / y, -gi * x / (y * y)),
                    };
                    ga[i] = da;
                    gb[bidx(i)] += db;
                }
                self.send(adj, a, ga);
                self.send(adj, b, gb);
            }
            Op::AddScalar { a } => self.send(adj, a, g.to_vec()),
            Op::Scale { a, c } => self.send(adj, a, g.iter().map(|v| v * c).collect()),
            Op::Unary { kind, a } => {
                let x = self.nodes[a].value.to_f64_vec();
                let y = out.to_f64_vec();
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| match kind {
                        UnaryOp::Tanh => gi * (1.0 - y[i] * y[i]),
                        UnaryOp::Relu => {
                            if x[i] > 0.0 {
                                *gi
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Log => gi / x[i],
                        UnaryOp::Exp => gi * y[i],
                    })
                    .collect();
                self.send(adj, a, ga);
            }
            Op::Sqrt { a, floor } => {
                let x = self.nodes[a].value.to_f64_vec();
                let y = out.to_f64_vec();
                let ga = g.iter().enumerate().map(|(i, gi)| if x[i] > floor && y[i] > 0.0 { gi / (2.0 * y[i]) } else { 0.0 }).collect();
                self.send(adj, a, ga);
            }
            Op::MatMul { a, b, r, c, k } => {
                let av = self.nodes[a].value.to_f64_vec();
                let bv = self.nodes[b].value.to_f64_vec();
                if self.nodes[a].needs_grad {
                    // dA = dOut · Bᵀ
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for p in 0..c {
                            let mut acc = 0.0;
                            for j in 0..k {
                                acc += g[i * k + j] * bv[p * k + j];
                            }
                            ga[i * c + p] = acc;
                        }
                    }
                    self.send(adj, a, ga);
                }
                if self.nodes[b].needs_grad {
                    // dB = Aᵀ · dOut
                    let mut gb = vec![0.0; c * k];
                    for i in 0..r {
                        for p in 0..c {
                            let x = av[i * c + p];
                            for j in 0..k {
                                gb[p * k + j] += x * g[i * k + j];
                            }
                        }
                    }
                    self.send(adj, b, gb);
                }
            }
            Op::Softmax { a } => {
                let y = out.to_f64_vec();
                let n = out.shape().last();
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let span = r * n..(r + 1) * n;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        ga[i] = y[i] * (g[i] - dot);
                    }
                }
                self.send(adj, a, ga);
            }
            Op::LogSoftmax { a } => {
                let y = out.to_f64_vec();
                let n = out.shape().last();
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let span = r * n..(r + 1) * n;
                    let total: f64 = g[span.clone()].iter().sum();
                    for i in span {
                        ga[i] = g[i] - libm::exp(y[i]) * total;
                    }
                }
                self.send(adj, a, ga);
            }
            Op::MeanFrames { a } => {
                let s = self.nodes[a].value.shape();
                let (m, d) = (s.dims()[0], s.dims()[1]);
                let ga = (0..m * d).map(|i| g[i % d] / m as f64).collect();
                self.send(adj, a, ga);
            }
            Op::VarFrames { a } => {
                let s = self.nodes[a].value.shape();
                let (m, d) = (s.dims()[0], s.dims()[1]);
                let x = self.nodes[a].value.to_f64_vec();
                let mean = Self::frame_means(&x, m, d);
                let ga = (0..m * d).map(|i| g[i % d] * 2.0 * (x[i] - mean[i % d]) / m as f64).collect();
                self.send(adj, a, ga);
            }
            Op::Concat { a, b } => {
                let n = self.nodes[a].value.numel();
                self.send(adj, a, g[..n].to_vec());
                self.send(adj, b, g[n..].to_vec());
            }
            Op::Stack { ref parts } => {
                let w = out.shape().last();
                for (r, &p) in parts.iter().enumerate() {
                    self.send(adj, p, g[r * w..(r + 1) * w].to_vec());
                }
            }
            Op::Reshape { a } => self.send(adj, a, g.to_vec()),
            Op::ScaleRows { x, w } => {
                let s = self.nodes[x].value.shape();
                let d = s.dims()[1];
                let xv = self.nodes[x].value.to_f64_vec();
                let wv = self.nodes[w].value.to_f64_vec();
                let gx = g.iter().enumerate().map(|(i, gi)| gi * wv[i / d]).collect();
                let mut gw = vec![0.0; wv.len()];
                for (i, gi) in g.iter().enumerate() {
                    gw[i / d] += gi * xv[i];
                }
                self.send(adj, x, gx);
                self.send(adj, w, gw);
            }
            Op::Row { a, i } => {
                let src = &self.nodes[a].value;
                let w = src.dims()[1];
                let mut ga = vec![0.0; src.numel()];
                ga[i * w..(i + 1) * w].copy_from_slice(g);
                self.send(adj, a, ga);
            }
            Op::Sum { a } => {
                let n = self.nodes[a].value.numel();
                self.send(adj, a, vec![g[0]; n]);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary { .. } => "binary",
        Op::AddScalar { .. } => "add_scalar",
        Op::Scale { .. } => "scale",
        Op::Unary { .. } => "unary",
        Op::Sqrt { .. } => "sqrt",
        Op::MatMul { .. } => "matmul",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::MeanFrames { .. } => "mean_frames",
        Op::VarFrames { .. } => "var_frames",
        Op::Concat { .. } => "concat",
        Op::Stack { .. } => "stack",
        Op::Reshape { .. } => "reshape",
        Op::ScaleRows { .. } => "scale_rows",
        Op::Row { .. } => "row",
        Op::Sum { .. } => "sum",
    }
}

/// Compares reverse-mode gradients with central differences.
///
/// `f` builds a scalar from the parameter variable it is handed. Returns the
/// maximum over parameters of `|analytic - numeric| / max(1, |analytic|)`.
/// `f` is evaluated twice at the unperturbed point first; differing results
/// are reported as [`Error::FlakyCheck`] (fix seeds, disable dropout).
///
/// Inputs sitting exactly on a kink (relu at 0, floored sqrt) should be nudged
/// off it by the caller.
pub fn finite_diff_check<F>(f: F, params: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..params.numel()).collect();
    finite_diff_check_at(f, params, eps, &all)
}

/// [`finite_diff_check`] restricted to the listed flat indices.
pub fn finite_diff_check_at<F>(mut f: F, params: &Tensor<f64>, eps: f64, indices: &[usize]) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    if let Some(bad) = indices.iter().find(|&&i| i >= params.numel()) {
        return Err(Error::Dimension(format!("index {} out of range for {} parameters", bad, params.numel())));
    }
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Domain(format!("finite-difference step {} must be positive", eps)));
    }
    let mut eval = |p: Tensor<f64>, track: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::<f64>::new();
        let v = if track { g.param(p) } else { g.constant(p) };
        let loss = f(&mut g, v)?;
        let value = g.value(loss).item()?;
        if track {
            g.backward(loss)?;
            Ok((value, g.grad(v).map(<[f64]>::to_vec)))
        } else {
            Ok((value, None))
        }
    };

    let (base, analytic) = eval(params.clone(), true)?;
    let (again, _) = eval(params.clone(), false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::FlakyCheck(format!("f evaluated to {} and then {}", base, again)));
    }
    let analytic = analytic.unwrap_or_else(|| vec![0.0; params.numel()]);

    let mut worst: f64 = 0.0;
    for &i in indices {
        let mut plus = params.clone();
        plus.data_mut()[i] += eps;
        let mut minus = params.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus, false)?.0 - eval(minus, false)?.0) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
