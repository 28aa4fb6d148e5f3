//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it in reverse and
//! accumulates gradients by plain summation in tape order.

use crate::error::{Error, Result};
use crate::ssm::kernel::{self, ScanDims, ScanInputs};
use crate::tensor::{matmul_nt_kernel, matmul_tn_kernel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Reciprocal(Var),
    Sqrt(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Gather(Var, usize, Vec<usize>),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SelectiveScan(Box<ScanNode>),
}

#[derive(Debug)]
struct ScanNode {
    dims: ScanDims,
    u: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d: Var,
    a: Vec<f64>,
    h: Vec<f64>,
    decay: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient of a scalar loss with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros of matching shape when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(&[x]);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self
            .value(a)
            .broadcast_binary(self.value(b), "add", |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self
            .value(a)
            .broadcast_binary(self.value(b), "sub", |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self
            .value(a)
            .broadcast_binary(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `[.., k] x [k, n]`; see [`Tensor::matmul`].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Matmul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).scale(k);
        self.unary(x, v, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|a| a + k);
        self.unary(x, v, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.unary(x, v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&a| a <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let v = self.value(x).map(f64::ln);
        Ok(self.unary(x, v, Op::Log(x)))
    }

    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().contains(&0.0) {
            return Err(Error::Domain {
                op: "reciprocal",
                msg: "zero input".into(),
            });
        }
        let v = self.value(x).map(|a| 1.0 / a);
        Ok(self.unary(x, v, Op::Reciprocal(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&a| a <= 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("non-positive input {bad}"),
            });
        }
        let v = self.value(x).map(f64::sqrt);
        Ok(self.unary(x, v, Op::Sqrt(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.unary(x, v, Op::Softplus(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).softmax_last()?;
        Ok(self.unary(x, v, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).log_softmax_last()?;
        Ok(self.unary(x, v, Op::LogSoftmax(x)))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).sum_axis(axis)?;
        Ok(self.unary(x, v, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).mean_axis(axis)?;
        Ok(self.unary(x, v, Op::MeanAxis(x, axis)))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.unary(x, v, Op::Transpose(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, axis)?;
        let ng = self.needs(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice_axis(axis, start, end)?;
        Ok(self.unary(x, v, Op::Gather(x, axis, (start..end).collect())))
    }

    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let v = self.value(x).gather_axis(axis, indices)?;
        Ok(self.unary(x, v, Op::Gather(x, axis, indices.to_vec())))
    }

    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid("reverse", format!("axis {axis} out of range")))?;
        let idx: Vec<usize> = (0..len).rev().collect();
        self.gather(x, axis, &idx)
    }

    /// Normalizes over the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "needs rank >= 1"))?;
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / c);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.unary(x, v, Op::LayerNorm { x, inv_std }))
    }

    /// Fused selective scan. Shapes: `u`, `delta`: `[B, T, E]`; `a_log`:
    /// `[E, N]` (the state values are `-exp(a_log)`); `b`, `c`: `[B, T, N]`;
    /// `d`: `[E]`. Returns `y: [B, T, E]`.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d: Var,
    ) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 3 {
            return Err(Error::invalid(
                "selective_scan",
                format!("u must be [B, T, E], got {us:?}"),
            ));
        }
        let (batch, len, inner) = (us[0], us[1], us[2]);
        let als = self.shape(a_log).to_vec();
        if als.len() != 2 || als[0] != inner {
            return Err(Error::shape("selective_scan", &us, &als));
        }
        let state = als[1];
        if self.shape(delta) != us.as_slice() {
            return Err(Error::shape("selective_scan", &us, self.shape(delta)));
        }
        for m in [b, c] {
            if self.shape(m) != [batch, len, state] {
                return Err(Error::shape(
                    "selective_scan",
                    &[batch, len, state],
                    self.shape(m),
                ));
            }
        }
        if self.shape(d) != [inner] {
            return Err(Error::shape("selective_scan", &[inner], self.shape(d)));
        }
        let dims = ScanDims {
            batch,
            len,
            inner,
            state,
        };
        let a: Vec<f64> = self.value(a_log).data().iter().map(|v| -v.exp()).collect();
        let out = kernel::scan_sequential(&ScanInputs {
            dims,
            u: self.value(u).data(),
            delta: self.value(delta).data(),
            a: &a,
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
        });
        let ng = self.needs(&[u, delta, a_log, b, c, d]);
        let y = Tensor::from_parts(us, out.y);
        let node = ScanNode {
            dims,
            u,
            delta,
            a_log,
            b,
            c,
            d,
            a,
            h: if ng { out.h } else { Vec::new() },
            decay: if ng { out.decay } else { Vec::new() },
        };
        Ok(self.push(y, Op::SelectiveScan(Box::new(node)), ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            self.backprop_node(node, &g, &mut grads, &mut send)?;
            // interior gradients are dropped once propagated
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
        send: &mut impl FnMut(Var, Tensor, &mut Vec<Option<Tensor>>),
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                send(*a, g.reduce_to(val(*a).shape()), grads);
                send(*b, g.reduce_to(val(*b).shape()), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.reduce_to(val(*a).shape()), grads);
                send(*b, g.reduce_to(val(*b).shape()).scale(-1.0), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.nodes[a.0].needs_grad {
                    let ga = g.broadcast_binary(bv, "mul", |x, y| x * y)?;
                    send(*a, ga.reduce_to(av.shape()), grads);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = g.broadcast_binary(av, "mul", |x, y| x * y)?;
                    send(*b, gb.reduce_to(bv.shape()), grads);
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = *av.shape().last().unwrap();
                let n = if bv.rank() == 2 { bv.shape()[1] } else { 1 };
                let m = av.len() / k;
                if self.nodes[a.0].needs_grad {
                    let ga = matmul_nt_kernel(g.data(), bv.data(), m, n, k);
                    send(*a, Tensor::from_parts(av.shape().to_vec(), ga), grads);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = matmul_tn_kernel(av.data(), g.data(), m, k, n);
                    send(*b, Tensor::from_parts(bv.shape().to_vec(), gb), grads);
                }
            }
            Op::Scale(x, k) => send(*x, g.scale(*k), grads),
            Op::AddScalar(x) => send(*x, g.clone(), grads),
            Op::Exp(x) => send(*x, g.zip_map(out, |a, b| a * b)?, grads),
            Op::Log(x) => send(*x, g.zip_map(val(*x), |a, b| a / b)?, grads),
            Op::Reciprocal(x) => send(*x, g.zip_map(out, |a, r| -a * r * r)?, grads),
            Op::Sqrt(x) => send(*x, g.zip_map(out, |a, s| 0.5 * a / s)?, grads),
            Op::Relu(x) => send(
                *x,
                g.zip_map(val(*x), |a, v| if v > 0.0 { a } else { 0.0 })?,
                grads,
            ),
            Op::Sigmoid(x) => send(*x, g.zip_map(out, |a, s| a * s * (1.0 - s))?, grads),
            Op::Softplus(x) => send(*x, g.zip_map(val(*x), |a, v| a * sigmoid(v))?, grads),
            Op::Softmax(x) => {
                let c = *out.shape().last().unwrap();
                let mut gx = g.data().to_vec();
                for (row, p) in gx.chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                    for (r, &pv) in row.iter_mut().zip(p) {
                        *r = pv * (*r - dot);
                    }
                }
                send(*x, Tensor::from_parts(out.shape().to_vec(), gx), grads);
            }
            Op::LogSoftmax(x) => {
                let c = *out.shape().last().unwrap();
                let mut gx = g.data().to_vec();
                for (row, ls) in gx.chunks_mut(c).zip(out.data().chunks(c)) {
                    let s: f64 = row.iter().sum();
                    for (r, &l) in row.iter_mut().zip(ls) {
                        *r -= l.exp() * s;
                    }
                }
                send(*x, Tensor::from_parts(out.shape().to_vec(), gx), grads);
            }
            Op::SumAxis(x, axis) => {
                let len = val(*x).shape()[*axis];
                send(*x, g.expand_axis(*axis, len), grads);
            }
            Op::MeanAxis(x, axis) => {
                let len = val(*x).shape()[*axis];
                send(*x, g.expand_axis(*axis, len).scale(1.0 / len as f64), grads);
            }
            Op::SumAll(x) => send(*x, Tensor::full(val(*x).shape(), g.item()), grads),
            Op::Reshape(x) => send(*x, g.reshape(val(*x).shape())?, grads),
            Op::Transpose(x) => send(*x, g.transpose()?, grads),
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    if self.nodes[p.0].needs_grad {
                        send(*p, g.slice_axis(*axis, start, start + len)?, grads);
                    }
                    start += len;
                }
            }
            Op::Gather(x, axis, idx) => {
                let len = val(*x).shape()[*axis];
                send(*x, g.scatter_add_axis(*axis, idx, len), grads);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = *out.shape().last().unwrap();
                let mut gx = g.data().to_vec();
                for ((row, yhat), is) in gx.chunks_mut(c).zip(out.data().chunks(c)).zip(inv_std) {
                    let mean_g = row.iter().sum::<f64>() / c as f64;
                    let mean_gy = row.iter().zip(yhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for (r, &y) in row.iter_mut().zip(yhat) {
                        *r = is * (*r - mean_g - y * mean_gy);
                    }
                }
                send(*x, Tensor::from_parts(out.shape().to_vec(), gx), grads);
            }
            Op::SelectiveScan(s) => {
                let inputs = ScanInputs {
                    dims: s.dims,
                    u: val(s.u).data(),
                    delta: val(s.delta).data(),
                    a: &s.a,
                    b: val(s.b).data(),
                    c: val(s.c).data(),
                    d: val(s.d).data(),
                };
                let gr = kernel::scan_backward(&inputs, &s.h, &s.decay, g.data());
                let shape_of = |v: Var| val(v).shape().to_vec();
                send(s.u, Tensor::from_parts(shape_of(s.u), gr.u), grads);
                send(
                    s.delta,
                    Tensor::from_parts(shape_of(s.delta), gr.delta),
                    grads,
                );
                // dA/dA_log = -exp(A_log) = A
                let ga: Vec<f64> = gr.a.iter().zip(&s.a).map(|(g, a)| g * a).collect();
                send(s.a_log, Tensor::from_parts(shape_of(s.a_log), ga), grads);
                send(s.b, Tensor::from_parts(shape_of(s.b), gr.b), grads);
                send(s.c, Tensor::from_parts(shape_of(s.c), gr.c), grads);
                send(s.d, Tensor::from_parts(shape_of(s.d), gr.d), grads);
            }
        }
        Ok(())
    }
}

/// Central-difference gradient estimate of `f` at `x`.
pub fn finite_difference<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `max |analytic - numeric| / max |numeric|` (the gradient's infinity-norm
/// scale), falling back to the absolute error when the gradient is ~0.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic.max_abs_diff(numeric);
    let scale = numeric
        .data()
        .iter()
        .chain(analytic.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}
