//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during a forward pass. Nodes only
//! ever reference earlier nodes, so the tape is acyclic by construction and
//! reverse index order is a valid topological order for backprop.

use super::kernels::{self, ConvGeom, GroupStats};
use super::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Neg,
    Silu,
    Square,
    Abs,
    Sigmoid,
    Exp,
    Tanh,
}

/// Spatial resampling used by the U-Net down/up paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// 2×2 stride-2 average pool.
    Down,
    /// Nearest-neighbour ×2.
    Up,
}

enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        stats: GroupStats,
    },
    Softmax(Var, usize),
    Resample(Var, Resample),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f32>,
        scale: f32,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f32>>,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    /// A graph that records edges for backprop.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records edges (inference).
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Accumulated gradient, if any has been propagated to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn push(&mut self, value: Tensor, parents: &[Var], op: Op) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = match op {
            BinaryOp::Add => |x: f32, y: f32| x + y,
            BinaryOp::Sub => |x: f32, y: f32| x - y,
            BinaryOp::Mul => |x: f32, y: f32| x * y,
            BinaryOp::Div => |x: f32, y: f32| x / y,
        };
        let out = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape())?;
            let sa = broadcast_strides(ta.shape(), &shape);
            let sb = broadcast_strides(tb.shape(), &shape);
            let mut data = vec![0.0f32; shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&shape, &sa, &sb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
            Tensor::new(&shape, data)?
        };
        Ok(self.push(out, &[a, b], Op::Binary(op, a, b)))
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

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let f: fn(f32) -> f32 = match op {
            UnaryOp::Neg => |x| -x,
            UnaryOp::Silu => |x| x / (1.0 + (-x).exp()),
            UnaryOp::Square => |x| x * x,
            UnaryOp::Abs => f32::abs,
            UnaryOp::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            UnaryOp::Exp => f32::exp,
            UnaryOp::Tanh => f32::tanh,
        };
        let out = self.value(a).map(f);
        self.push(out, &[a], Op::Unary(op, a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, &[a], Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, &[a], Op::AddScalar(a))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        self.push(Tensor::scalar(s as f32), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&x| x as f64).sum();
        let m = s / t.numel().max(1) as f64;
        self.push(Tensor::scalar(m as f32), &[a], Op::Mean(a))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, &[a], Op::Reshape(a)))
    }

    /// Swap the two trailing axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let r = t.rank();
        if r < 2 {
            return Err(Error::Geometry(format!(
                "transpose needs rank >= 2, got {:?}",
                t.shape()
            )));
        }
        let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
        let out = transpose_data(t.data(), m, n);
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, &[a], Op::TransposeLast2(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::Geometry("empty concat".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Geometry(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape(&first, s, "concat"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let blk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, parts, Op::Concat(parts.to_vec(), axis)))
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let geo = MatMulGeom::new(ta.shape(), tb.shape())?;
        let mut out = vec![0.0f32; geo.batch * geo.m * geo.n];
        let (da, db) = (ta.data(), tb.data());
        let (mk, kn, mn) = (geo.m * geo.k, geo.k * geo.n, geo.m * geo.n);
        crate::parallel::for_each_chunk(&mut out, mn.max(1), |bi, c| {
            let (ia, ib) = geo.offsets[bi];
            kernels::gemm(
                geo.m,
                geo.k,
                geo.n,
                &da[ia * mk..(ia + 1) * mk],
                false,
                &db[ib * kn..(ib + 1) * kn],
                false,
                c,
                false,
            );
        });
        let out = Tensor::new(&geo.out_shape, out)?;
        Ok(self.push(out, &[a, b], Op::MatMul(a, b)))
    }

    /// Scaled dot-product attention on channel-major operands `[.., d, L]`:
    /// `out[:, i] = Σ_j softmax_j(scale · q[:, i]·k[:, j]) v[:, j]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f32) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() < 2 {
            return Err(Error::Geometry(format!("attention needs rank >= 2, got {s:?}")));
        }
        for other in [k, v] {
            if self.shape(other) != s.as_slice() {
                return Err(Error::shape(&s, self.shape(other), "attention operands"));
            }
        }
        let (d, l) = (s[s.len() - 2], s[s.len() - 1]);
        let b = s[..s.len() - 2].iter().product();
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            b,
            d,
            l,
            scale,
        );
        let out = Tensor::new(&s, out)?;
        Ok(self.push(
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
        ))
    }

    /// 2-D cross-correlation over `[N, C, H, W]` with weight `[O, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Geometry(format!(
                "conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(xs, ws, "conv2d channels"));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv2d stride 0".into()));
        }
        let (hp, wp) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ws[2] > hp || ws[3] > wp || ws[2] == 0 || ws[3] == 0 {
            return Err(Error::Geometry(format!(
                "kernel {}x{} exceeds padded input {hp}x{wp}",
                ws[2], ws[3]
            )));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            ho: (hp - ws[2]) / stride + 1,
            wo: (wp - ws[3]) / stride + 1,
        };
        if let Some(b) = bias {
            if self.shape(b) != [geom.o] {
                return Err(Error::shape(self.shape(b), &[geom.o], "conv2d bias"));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&[geom.n, geom.o, geom.ho, geom.wo], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            out,
            &parents,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Group normalization of `[N, C, ..]` with per-channel affine `scale`/`shift` of shape `[C]`.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        eps: f32,
        scale: Var,
        shift: Var,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Geometry(format!("group_norm needs [N, C, ..], got {xs:?}")));
        }
        let c = xs[1];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        for p in [scale, shift] {
            if self.shape(p) != [c] {
                return Err(Error::shape(self.shape(p), &[c], "group_norm affine"));
            }
        }
        let spatial: usize = xs[2..].iter().product();
        let (out, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            xs[0],
            c,
            spatial,
            groups,
            eps as f64,
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let out = Tensor::new(&xs, out)?;
        Ok(self.push(
            out,
            &[x, scale, shift],
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                stats,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Geometry(format!("softmax axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let y = kernels::softmax_forward(self.value(x).data(), outer, len, inner);
        let out = Tensor::new(&shape, y)?;
        Ok(self.push(out, &[x], Op::Softmax(x, axis)))
    }

    /// Halve (average pool) or double (nearest neighbour) the two trailing axes.
    pub fn resample(&mut self, x: Var, dir: Resample) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Geometry(format!("resample needs rank >= 2, got {shape:?}")));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes: usize = shape[..r - 2].iter().product();
        let mut out_shape = shape.clone();
        let data = match dir {
            Resample::Down => {
                if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
                    return Err(Error::Geometry(format!(
                        "downsampling needs even extents, got {h}x{w}"
                    )));
                }
                out_shape[r - 2] = h / 2;
                out_shape[r - 1] = w / 2;
                kernels::avg_pool2(self.value(x).data(), planes, h, w)
            }
            Resample::Up => {
                out_shape[r - 2] = h * 2;
                out_shape[r - 1] = w * 2;
                kernels::upsample2(self.value(x).data(), planes, h, w)
            }
        };
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, &[x], Op::Resample(x, dir)))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulate d(loss)/d(node) into every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Geometry(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            self.propagate(i, &g, &mut pending);
            add_owned(&mut self.nodes[i].grad, g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f32], pending: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Binary(op, a, b) => self.binary_backward(op, a, b, &node.value, g, pending),
            &Op::Unary(op, a) => {
                let x = self.value(a).data();
                let y = node.value.data();
                let d: Vec<f32> = match op {
                    UnaryOp::Neg => g.iter().map(|v| -v).collect(),
                    UnaryOp::Silu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                    UnaryOp::Square => x.iter().zip(g).map(|(&x, &g)| 2.0 * x * g).collect(),
                    UnaryOp::Abs => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                        .collect(),
                    UnaryOp::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect(),
                    UnaryOp::Exp => y.iter().zip(g).map(|(&y, &g)| g * y).collect(),
                    UnaryOp::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (1.0 - y * y)).collect(),
                };
                add_owned(&mut pending[a.0], d);
            }
            &Op::Scale(a, c) => add_owned(&mut pending[a.0], g.iter().map(|v| v * c).collect()),
            &Op::AddScalar(a) | &Op::Reshape(a) => add_into(&mut pending[a.0], g),
            &Op::Sum(a) => {
                let n = self.value(a).numel();
                add_owned(&mut pending[a.0], vec![g[0]; n]);
            }
            &Op::Mean(a) => {
                let n = self.value(a).numel();
                add_owned(&mut pending[a.0], vec![g[0] / n.max(1) as f32; n]);
            }
            &Op::TransposeLast2(a) => {
                let s = node.value.shape();
                let r = s.len();
                add_owned(&mut pending[a.0], transpose_data(g, s[r - 2], s[r - 1]));
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let blk = self.shape(*p)[*axis] * inner;
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(outer * blk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + offset..o * row + offset + blk]);
                        }
                        add_owned(&mut pending[p.0], d);
                    }
                    offset += blk;
                }
            }
            &Op::MatMul(a, b) => self.matmul_backward(a, b, g, pending),
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => {
                let s = node.value.shape();
                let (d, l) = (s[s.len() - 2], s[s.len() - 1]);
                let b = s[..s.len() - 2].iter().product();
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    b,
                    d,
                    l,
                    *scale,
                );
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        add_owned(&mut pending[var.0], grad);
                    }
                }
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.wants(input) {
                    let dx = kernels::conv2d_backward_input(&geom, self.value(weight).data(), g);
                    add_owned(&mut pending[input.0], dx);
                }
                if self.wants(weight) {
                    let dw = kernels::conv2d_backward_weight(&geom, self.value(input).data(), g);
                    add_owned(&mut pending[weight.0], dw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    add_owned(&mut pending[b.0], kernels::conv2d_backward_bias(&geom, g));
                }
            }
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                stats,
            } => {
                let xs = self.shape(*x);
                let spatial: usize = xs[2..].iter().product();
                let (dx, ds, db) = kernels::group_norm_backward(
                    self.value(*x).data(),
                    g,
                    xs[0],
                    xs[1],
                    spatial,
                    *groups,
                    self.value(*scale).data(),
                    stats,
                );
                if self.wants(*x) {
                    add_owned(&mut pending[x.0], dx);
                }
                if self.wants(*scale) {
                    add_owned(&mut pending[scale.0], ds);
                }
                if self.wants(*shift) {
                    add_owned(&mut pending[shift.0], db);
                }
            }
            &Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(node.value.shape(), axis);
                let dx = kernels::softmax_backward(node.value.data(), g, outer, len, inner);
                add_owned(&mut pending[a.0], dx);
            }
            &Op::Resample(a, dir) => {
                let s = self.shape(a);
                let r = s.len();
                let planes: usize = s[..r - 2].iter().product();
                let (h, w) = (s[r - 2], s[r - 1]);
                let dx = match dir {
                    Resample::Down => kernels::avg_pool2_backward(g, planes, h, w),
                    Resample::Up => kernels::upsample2_backward(g, planes, h, w),
                };
                add_owned(&mut pending[a.0], dx);
            }
        }
    }

    fn binary_backward(
        &self,
        op: BinaryOp,
        a: Var,
        b: Var,
        out: &Tensor,
        g: &[f32],
        pending: &mut [Option<Vec<f32>>],
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (xa, xb) = (ta.data(), tb.data());
        let (wa, wb) = (self.wants(a), self.wants(b));
        let local = |ia: usize, ib: usize| -> (f32, f32) {
            match op {
                BinaryOp::Add => (1.0, 1.0),
                BinaryOp::Sub => (1.0, -1.0),
                BinaryOp::Mul => (xb[ib], xa[ia]),
                BinaryOp::Div => (1.0 / xb[ib], -xa[ia] / (xb[ib] * xb[ib])),
            }
        };
        let mut ga = if wa { vec![0.0f32; xa.len()] } else { vec![] };
        let mut gb = if wb { vec![0.0f32; xb.len()] } else { vec![] };
        if ta.shape() == tb.shape() {
            for i in 0..g.len() {
                let (la, lb) = local(i, i);
                if wa {
                    ga[i] = g[i] * la;
                }
                if wb {
                    gb[i] = g[i] * lb;
                }
            }
        } else {
            let shape = out.shape();
            let sa = broadcast_strides(ta.shape(), shape);
            let sb = broadcast_strides(tb.shape(), shape);
            for_each_broadcast(shape, &sa, &sb, |i, ia, ib| {
                let (la, lb) = local(ia, ib);
                if wa {
                    ga[ia] += g[i] * la;
                }
                if wb {
                    gb[ib] += g[i] * lb;
                }
            });
        }
        if wa {
            add_owned(&mut pending[a.0], ga);
        }
        if wb {
            add_owned(&mut pending[b.0], gb);
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[f32], pending: &mut [Option<Vec<f32>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let geo = MatMulGeom::new(ta.shape(), tb.shape()).expect("validated in forward");
        let (m, k, n) = (geo.m, geo.k, geo.n);
        let (mk, kn, mn) = (m * k, k * n, m * n);
        if self.wants(a) {
            let mut da = vec![0.0f32; ta.numel()];
            if geo.a_unbroadcast {
                crate::parallel::for_each_chunk(&mut da, mk.max(1), |bi, dst| {
                    let ib = geo.offsets[bi].1;
                    let gb = &g[bi * mn..(bi + 1) * mn];
                    kernels::gemm(m, n, k, gb, false, &tb.data()[ib * kn..(ib + 1) * kn], true, dst, false);
                });
            } else {
                for (bi, &(ia, ib)) in geo.offsets.iter().enumerate() {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[bi * mn..(bi + 1) * mn],
                        false,
                        &tb.data()[ib * kn..(ib + 1) * kn],
                        true,
                        &mut da[ia * mk..(ia + 1) * mk],
                        true,
                    );
                }
            }
            add_owned(&mut pending[a.0], da);
        }
        if self.wants(b) {
            let mut db = vec![0.0f32; tb.numel()];
            if geo.b_unbroadcast {
                crate::parallel::for_each_chunk(&mut db, kn.max(1), |bi, dst| {
                    let ia = geo.offsets[bi].0;
                    let gb = &g[bi * mn..(bi + 1) * mn];
                    kernels::gemm(k, m, n, &ta.data()[ia * mk..(ia + 1) * mk], true, gb, false, dst, false);
                });
            } else {
                for (bi, &(ia, ib)) in geo.offsets.iter().enumerate() {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &ta.data()[ia * mk..(ia + 1) * mk],
                        true,
                        &g[bi * mn..(bi + 1) * mn],
                        false,
                        &mut db[ib * kn..(ib + 1) * kn],
                        true,
                    );
                }
            }
            add_owned(&mut pending[b.0], db);
        }
    }
}

fn transpose_data(src: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    let mat = m * n;
    if mat == 0 {
        return out;
    }
    for (s, d) in src.chunks(mat).zip(out.chunks_mut(mat)) {
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}

struct MatMulGeom {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    out_shape: Vec<usize>,
    /// Matrix index into (a, b) for each output batch entry.
    offsets: Vec<(usize, usize)>,
    a_unbroadcast: bool,
    b_unbroadcast: bool,
}

impl MatMulGeom {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Geometry(format!(
                "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (k2, n) = (sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return Err(Error::shape(sa, sb, "matmul inner dimension"));
        }
        let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
        let bo = broadcast_shape(ba, bb).map_err(|_| Error::shape(sa, sb, "matmul batch"))?;
        let batch: usize = bo.iter().product();
        let stra = broadcast_strides(ba, &bo);
        let strb = broadcast_strides(bb, &bo);
        let mut offsets = Vec::with_capacity(batch);
        for_each_broadcast(&bo, &stra, &strb, |_, ia, ib| offsets.push((ia, ib)));
        let na: usize = ba.iter().product();
        let nb: usize = bb.iter().product();
        let mut out_shape = bo.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            batch,
            out_shape,
            offsets,
            a_unbroadcast: na == batch,
            b_unbroadcast: nb == batch,
        })
    }
}
