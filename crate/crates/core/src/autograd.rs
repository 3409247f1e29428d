//! Eager reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is already a topological order. [`Graph::backward`]
//! walks the record in reverse and accumulates gradients into every leaf
//! created with [`Graph::param`]. A leaf used several times (tied weights)
//! receives the sum of all path gradients.
//!
//! Graphs are built per forward pass and dropped afterwards. They are not
//! `Sync`; independent graphs may live on different threads.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{axis_blocks, matmul_acc, transpose, Tensor};

/// Smallest resultant length accepted by [`atan2`].
pub const ATAN2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct DotPlan {
    perm_a: Vec<usize>,
    perm_b: Vec<usize>,
    permuted_a: Vec<usize>,
    permuted_b: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias { input: NodeId, bias: NodeId },
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    SumAxis { input: NodeId, axis: usize },
    Reshape(NodeId),
    Tensordot { a: NodeId, b: NodeId, plan: Box<DotPlan> },
    Softmax { input: NodeId, axis: usize },
    CrossEntropy { logits: NodeId, label: usize },
    Atan2 { y: NodeId, x: NodeId },
    SmoothL1 { pred: NodeId, target: NodeId, beta: f64 },
    Flip { input: NodeId, axis: usize },
    Concat { inputs: Vec<NodeId>, axis: usize },
    SliceWrap { input: NodeId, axis: usize, start: isize, len: usize },
    Select { input: NodeId, axis: usize, index: usize },
    Conv2d { input: NodeId, weight: NodeId, stride: usize, pad: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape(..) => "reshape",
            Op::Tensordot { .. } => "tensordot",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Atan2 { .. } => "atan2",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Flip { .. } => "flip",
            Op::Concat { .. } => "concat",
            Op::SliceWrap { .. } => "slice_wrap",
            Op::Select { .. } => "select",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        f.debug_list().entries(nodes.iter().map(|n| (n.op.name(), n.value.shape().to_vec()))).finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[NodeId]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|i| nodes[i.0].requires_grad)
        };
        self.push_raw(value, op, requires_grad)
    }

    fn value_of(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns the accumulated gradient of every gradient-carrying leaf
    /// reachable from `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id.0 + 1];
        grads[loss.id.0] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.id.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                out.grads.insert(NodeId(i), g);
                continue;
            }
            backprop(&nodes, &node.op, &node.value, &g, &mut grads);
        }
        for (id, g) in &out.grads {
            if !g.is_finite() {
                return Err(Error::NumericalDomain(format!(
                    "non-finite gradient for leaf {}",
                    id.0
                )));
            }
        }
        Ok(out)
    }
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Tensor>],
    id: NodeId,
) -> Option<&'a mut Tensor> {
    let node = &nodes[id.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(node.value.shape())))
}

fn acc_with(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    id: NodeId,
    f: impl FnOnce(&mut [f64]),
) {
    if let Some(t) = slot(nodes, grads, id) {
        f(t.data_mut());
    }
}

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: NodeId| Rc::clone(&nodes[id.0].value);
    let gd = g.data();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_with(nodes, grads, *a, |d| add_into(d, gd, 1.0));
            acc_with(nodes, grads, *b, |d| add_into(d, gd, 1.0));
        }
        Op::Sub(a, b) => {
            acc_with(nodes, grads, *a, |d| add_into(d, gd, 1.0));
            acc_with(nodes, grads, *b, |d| add_into(d, gd, -1.0));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_with(nodes, grads, *a, |d| {
                for ((d, &g), &b) in d.iter_mut().zip(gd).zip(bv.data()) {
                    *d += g * b;
                }
            });
            acc_with(nodes, grads, *b, |d| {
                for ((d, &g), &a) in d.iter_mut().zip(gd).zip(av.data()) {
                    *d += g * a;
                }
            });
        }
        Op::AddBias { input, bias } => {
            acc_with(nodes, grads, *input, |d| add_into(d, gd, 1.0));
            acc_with(nodes, grads, *bias, |d| {
                let n = d.len();
                for row in gd.chunks_exact(n) {
                    add_into(d, row, 1.0);
                }
            });
        }
        Op::Scale(a, c) => acc_with(nodes, grads, *a, |d| add_into(d, gd, *c)),
        Op::AddScalar(a) | Op::Reshape(a) => acc_with(nodes, grads, *a, |d| add_into(d, gd, 1.0)),
        Op::Sin(a) => {
            let av = val(*a);
            acc_with(nodes, grads, *a, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(gd).zip(av.data()) {
                    *d += g * x.cos();
                }
            });
        }
        Op::Cos(a) => {
            let av = val(*a);
            acc_with(nodes, grads, *a, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(gd).zip(av.data()) {
                    *d -= g * x.sin();
                }
            });
        }
        Op::Relu(a) => {
            let av = val(*a);
            acc_with(nodes, grads, *a, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(gd).zip(av.data()) {
                    if x > 0.0 {
                        *d += g;
                    }
                }
            });
        }
        Op::Sum(a) => {
            let g0 = g.item();
            acc_with(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
        }
        Op::SumAxis { input, axis } => {
            let (outer, n, inner) = axis_blocks(val(*input).shape(), *axis);
            acc_with(nodes, grads, *input, |d| {
                for o in 0..outer {
                    let grow = &gd[o * inner..(o + 1) * inner];
                    for i in 0..n {
                        add_into(&mut d[(o * n + i) * inner..(o * n + i + 1) * inner], grow, 1.0);
                    }
                }
            });
        }
        Op::Tensordot { a, b, plan } => {
            let (av, bv) = (val(*a), val(*b));
            let DotPlan { m, k, n, .. } = **plan;
            if nodes[a.0].requires_grad {
                let bm = bv.permute(&plan.perm_b);
                let bt = transpose(bm.data(), k, n);
                let mut ga = vec![0.0; m * k];
                matmul_acc(gd, &bt, &mut ga, m, n, k);
                let ga = Tensor::new(plan.permuted_a.clone(), ga)
                    .expect("tensordot grad shape")
                    .permute(&inverse_perm(&plan.perm_a));
                acc_with(nodes, grads, *a, |d| add_into(d, ga.data(), 1.0));
            }
            if nodes[b.0].requires_grad {
                let am = av.permute(&plan.perm_a);
                let at = transpose(am.data(), m, k);
                let mut gb = vec![0.0; k * n];
                matmul_acc(&at, gd, &mut gb, k, m, n);
                let gb = Tensor::new(plan.permuted_b.clone(), gb)
                    .expect("tensordot grad shape")
                    .permute(&inverse_perm(&plan.perm_b));
                acc_with(nodes, grads, *b, |d| add_into(d, gb.data(), 1.0));
            }
        }
        Op::Softmax { input, axis } => {
            let (outer, n, inner) = axis_blocks(out.shape(), *axis);
            let y = out.data();
            acc_with(nodes, grads, *input, |d| {
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| gd[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            d[at(i)] += y[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
            });
        }
        Op::CrossEntropy { logits, label } => {
            let x = val(*logits);
            let p = softmax_slice(x.data());
            let g0 = g.item();
            acc_with(nodes, grads, *logits, |d| {
                for (i, (d, p)) in d.iter_mut().zip(&p).enumerate() {
                    let onehot = if i == *label { 1.0 } else { 0.0 };
                    *d += g0 * (p - onehot);
                }
            });
        }
        Op::Atan2 { y, x } => {
            let (yv, xv) = (val(*y), val(*x));
            acc_with(nodes, grads, *y, |d| {
                for (i, d) in d.iter_mut().enumerate() {
                    let (yy, xx) = (yv.data()[i], xv.data()[i]);
                    *d += gd[i] * xx / (xx * xx + yy * yy);
                }
            });
            acc_with(nodes, grads, *x, |d| {
                for (i, d) in d.iter_mut().enumerate() {
                    let (yy, xx) = (yv.data()[i], xv.data()[i]);
                    *d -= gd[i] * yy / (xx * xx + yy * yy);
                }
            });
        }
        Op::SmoothL1 { pred, target, beta } => {
            let (pv, tv) = (val(*pred), val(*target));
            let g0 = g.item();
            let slope: Vec<f64> = pv
                .data()
                .iter()
                .zip(tv.data())
                .map(|(p, t)| {
                    let diff = p - t;
                    if diff.abs() < *beta {
                        diff / beta
                    } else {
                        diff.signum()
                    }
                })
                .collect();
            acc_with(nodes, grads, *pred, |d| add_into(d, &slope, g0));
            acc_with(nodes, grads, *target, |d| add_into(d, &slope, -g0));
        }
        Op::Flip { input, axis } => {
            let (outer, n, inner) = axis_blocks(out.shape(), *axis);
            acc_with(nodes, grads, *input, |d| {
                for o in 0..outer {
                    for i in 0..n {
                        let src = (o * n + i) * inner;
                        let dst = (o * n + (n - 1 - i)) * inner;
                        add_into(&mut d[dst..dst + inner], &gd[src..src + inner], 1.0);
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_blocks(out.shape(), *axis);
            let mut offset = 0;
            for id in inputs {
                let n = nodes[id.0].value.shape()[*axis];
                acc_with(nodes, grads, *id, |d| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * n * inner;
                        add_into(&mut d[dst..dst + n * inner], &gd[src..src + n * inner], 1.0);
                    }
                });
                offset += n;
            }
        }
        Op::SliceWrap { input, axis, start, len } => {
            let (outer, n, inner) = axis_blocks(val(*input).shape(), *axis);
            acc_with(nodes, grads, *input, |d| {
                for o in 0..outer {
                    for j in 0..*len {
                        let s = wrap_index(*start + j as isize, n);
                        let src = (o * len + j) * inner;
                        let dst = (o * n + s) * inner;
                        add_into(&mut d[dst..dst + inner], &gd[src..src + inner], 1.0);
                    }
                }
            });
        }
        Op::Select { input, axis, index } => {
            let (outer, n, inner) = axis_blocks(val(*input).shape(), *axis);
            acc_with(nodes, grads, *input, |d| {
                for o in 0..outer {
                    let dst = (o * n + index) * inner;
                    add_into(&mut d[dst..dst + inner], &gd[o * inner..(o + 1) * inner], 1.0);
                }
            });
        }
        Op::Conv2d { input, weight, stride, pad } => {
            let (xv, wv) = (val(*input), val(*weight));
            let geo = ConvGeometry::new(xv.shape(), wv.shape(), *stride, *pad)
                .expect("validated at construction");
            if nodes[input.0].requires_grad {
                let mut dx = vec![0.0; xv.len()];
                conv2d_grad_input(&geo, wv.data(), gd, &mut dx);
                acc_with(nodes, grads, *input, |d| add_into(d, &dx, 1.0));
            }
            if nodes[weight.0].requires_grad {
                acc_with(nodes, grads, *weight, |d| conv2d_grad_weight(&geo, xv.data(), gd, d));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    debug_assert_eq!(dst.len(), src.len());
    if c == 1.0 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += c * s;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn wrap_index(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects [B,H,W,C] input and [KH,KW,Ci,Co] weight, got {x:?} and {w:?}"
            )));
        }
        if x[3] != w[2] {
            return Err(Error::dim(format!("conv2d channels: input {} vs weight {}", x[3], w[2])));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (h, wd) = (x[1] + 2 * pad, x[2] + 2 * pad);
        if h < w[0] || wd < w[1] {
            return Err(Error::dim(format!("conv2d kernel {w:?} larger than padded input {x:?}")));
        }
        Ok(Self {
            batch: x[0],
            h: x[1],
            w: x[2],
            ci: x[3],
            kh: w[0],
            kw: w[1],
            co: w[3],
            ho: (h - w[0]) / stride + 1,
            wo: (wd - w[1]) / stride + 1,
            stride,
            pad,
        })
    }

    /// Input pixel offset for output (oy, ox) and tap (ky, kx), if inside.
    #[inline]
    fn tap(&self, b: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            return None;
        }
        Some(((b * self.h + iy as usize) * self.w + ix as usize) * self.ci)
    }

    fn out_rows(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let (ho, wo, co) = (self.ho, self.wo, self.co);
        (0..self.batch).flat_map(move |b| {
            (0..ho).flat_map(move |oy| (0..wo).map(move |ox| (b, oy, ox, ((b * ho + oy) * wo + ox) * co)))
        })
    }
}

fn conv2d_forward(geo: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let ConvGeometry { ci, co, kh, kw, .. } = *geo;
    let mut out = vec![0.0; geo.batch * geo.ho * geo.wo * co];
    for (b, oy, ox, o) in geo.out_rows() {
        let row = &mut out[o..o + co];
        for ky in 0..kh {
            for kx in 0..kw {
                let Some(px) = geo.tap(b, oy, ox, ky, kx) else { continue };
                let wbase = (ky * kw + kx) * ci * co;
                for c in 0..ci {
                    let xv = x[px + c];
                    let wrow = &w[wbase + c * co..wbase + (c + 1) * co];
                    for (r, &wv) in row.iter_mut().zip(wrow) {
                        *r += xv * wv;
                    }
                }
            }
        }
    }
    out
}

fn conv2d_grad_input(geo: &ConvGeometry, w: &[f64], g: &[f64], dx: &mut [f64]) {
    let ConvGeometry { ci, co, kh, kw, .. } = *geo;
    // [KH,KW,Co,Ci] so the inner loop runs over contiguous input channels
    let mut wt = vec![0.0; w.len()];
    for tap in 0..kh * kw {
        let t = transpose(&w[tap * ci * co..(tap + 1) * ci * co], ci, co);
        wt[tap * ci * co..(tap + 1) * ci * co].copy_from_slice(&t);
    }
    for (b, oy, ox, o) in geo.out_rows() {
        let grow = &g[o..o + co];
        for ky in 0..kh {
            for kx in 0..kw {
                let Some(px) = geo.tap(b, oy, ox, ky, kx) else { continue };
                let wbase = (ky * kw + kx) * ci * co;
                let dpix = &mut dx[px..px + ci];
                for (oc, &gv) in grow.iter().enumerate() {
                    let wrow = &wt[wbase + oc * ci..wbase + (oc + 1) * ci];
                    for (d, &wv) in dpix.iter_mut().zip(wrow) {
                        *d += gv * wv;
                    }
                }
            }
        }
    }
}

fn conv2d_grad_weight(geo: &ConvGeometry, x: &[f64], g: &[f64], dw: &mut [f64]) {
    let ConvGeometry { ci, co, kh, kw, .. } = *geo;
    for (b, oy, ox, o) in geo.out_rows() {
        let grow = &g[o..o + co];
        for ky in 0..kh {
            for kx in 0..kw {
                let Some(px) = geo.tap(b, oy, ox, ky, kx) else { continue };
                let wbase = (ky * kw + kx) * ci * co;
                for c in 0..ci {
                    let xv = x[px + c];
                    let drow = &mut dw[wbase + c * co..wbase + (c + 1) * co];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += xv * gv;
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn graph(self) -> &'g Graph {
        self.graph
    }

    pub fn value(self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(self) -> bool {
        self.graph.nodes.borrow()[self.id.0].requires_grad
    }

    fn same_graph(self, other: Var<'_>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
    }

    fn zip_same(self, other: Var<'g>, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = self.value().map(f);
        self.graph.push(value, op, &[self.id])
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.graph.push(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.graph.push(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.graph.push(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds `bias` to every trailing block; `bias.shape()` must equal the
    /// trailing axes of `self`.
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(bias);
        let (a, b) = (self.value(), bias.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(format!("add_bias: {sb:?} is not a suffix of {sa:?}")));
        }
        let n = b.len();
        let mut v = (*a).clone();
        for row in v.data_mut().chunks_exact_mut(n) {
            add_into(row, b.data(), 1.0);
        }
        Ok(self.graph.push(v, Op::AddBias { input: self.id, bias: bias.id }, &[self.id, bias.id]))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn sin(self) -> Var<'g> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'g> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.graph.push(v, Op::Sum(self.id), &[self.id])
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        check_axis(a.shape(), axis)?;
        let (outer, n, inner) = axis_blocks(a.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &a.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src, 1.0);
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.graph.push(v, Op::SumAxis { input: self.id, axis }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.graph.push(v, Op::Reshape(self.id), &[self.id]))
    }

    pub fn tensordot(self, other: Var<'g>, axes: &[(usize, usize)]) -> Result<Var<'g>> {
        tensordot(self, other, axes)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        softmax_axis(self, axis)
    }

    pub fn flip(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        check_axis(a.shape(), axis)?;
        let (outer, n, inner) = axis_blocks(a.shape(), axis);
        let mut out = Vec::with_capacity(a.len());
        for o in 0..outer {
            for i in (0..n).rev() {
                out.extend_from_slice(&a.data()[(o * n + i) * inner..(o * n + i + 1) * inner]);
            }
        }
        let v = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.graph.push(v, Op::Flip { input: self.id, axis }, &[self.id]))
    }

    /// `len` consecutive entries along `axis` starting at `start`, with
    /// indices taken modulo the axis extent (so `start` may be negative and
    /// the window may cross the end).
    pub fn slice_wrap(self, axis: usize, start: isize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        check_axis(a.shape(), axis)?;
        if len == 0 {
            return Err(Error::dim("slice_wrap: empty window"));
        }
        let (outer, n, inner) = axis_blocks(a.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in 0..len {
                let s = wrap_index(start + j as isize, n);
                out.extend_from_slice(&a.data()[(o * n + s) * inner..(o * n + s + 1) * inner]);
            }
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, out)?;
        Ok(self.graph.push(v, Op::SliceWrap { input: self.id, axis, start, len }, &[self.id]))
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(self, axis: usize, index: usize) -> Result<Var<'g>> {
        let a = self.value();
        check_axis(a.shape(), axis)?;
        let (outer, n, inner) = axis_blocks(a.shape(), axis);
        if index >= n {
            return Err(Error::Index { index, extent: n });
        }
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            out.extend_from_slice(&a.data()[(o * n + index) * inner..(o * n + index + 1) * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.graph.push(v, Op::Select { input: self.id, axis, index }, &[self.id]))
    }

    /// 2-D convolution of an NHWC batch with a `[KH, KW, Ci, Co]` kernel.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.same_graph(weight);
        let (x, w) = (self.value(), weight.value());
        let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
        let out = conv2d_forward(&geo, x.data(), w.data());
        let v = Tensor::new(vec![geo.batch, geo.ho, geo.wo, geo.co], out)?;
        Ok(self.graph.push(
            v,
            Op::Conv2d { input: self.id, weight: weight.id, stride, pad },
            &[self.id, weight.id],
        ))
    }
}

/// Generalised tensor contraction.
///
/// Output axes are the uncontracted axes of `a` followed by those of `b`.
/// Each output entry sums its products in row-major order of the contracted
/// index tuple (pairs taken in the order given).
pub fn tensordot<'g>(a: Var<'g>, b: Var<'g>, axes: &[(usize, usize)]) -> Result<Var<'g>> {
    a.same_graph(b);
    let (av, bv) = (a.value(), b.value());
    let (sa, sb) = (av.shape(), bv.shape());
    for &(i, j) in axes {
        check_axis(sa, i)?;
        check_axis(sb, j)?;
        if sa[i] != sb[j] {
            return Err(Error::dim(format!(
                "tensordot: axis {i} of {sa:?} does not match axis {j} of {sb:?}"
            )));
        }
    }
    let ca: Vec<usize> = axes.iter().map(|p| p.0).collect();
    let cb: Vec<usize> = axes.iter().map(|p| p.1).collect();
    let dup = |c: &[usize]| c.iter().enumerate().any(|(i, x)| c[..i].contains(x));
    if dup(&ca) || dup(&cb) {
        return Err(Error::dim("tensordot: axis contracted twice"));
    }
    let free_a: Vec<usize> = (0..sa.len()).filter(|i| !ca.contains(i)).collect();
    let free_b: Vec<usize> = (0..sb.len()).filter(|j| !cb.contains(j)).collect();
    let perm_a: Vec<usize> = free_a.iter().chain(&ca).copied().collect();
    let perm_b: Vec<usize> = cb.iter().chain(&free_b).copied().collect();
    let m: usize = free_a.iter().map(|&i| sa[i]).product();
    let k: usize = ca.iter().map(|&i| sa[i]).product();
    let n: usize = free_b.iter().map(|&j| sb[j]).product();

    let am = av.permute(&perm_a);
    let bm = bv.permute(&perm_b);
    let mut out = vec![0.0; m * n];
    matmul_acc(am.data(), bm.data(), &mut out, m, k, n);
    let shape: Vec<usize> = free_a.iter().map(|&i| sa[i]).chain(free_b.iter().map(|&j| sb[j])).collect();
    let plan = DotPlan {
        permuted_a: am.shape().to_vec(),
        permuted_b: bm.shape().to_vec(),
        perm_a,
        perm_b,
        m,
        k,
        n,
    };
    let v = Tensor::new(shape, out)?;
    Ok(a.graph.push(v, Op::Tensordot { a: a.id, b: b.id, plan: Box::new(plan) }, &[a.id, b.id]))
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax_axis(t: Var<'_>, axis: usize) -> Result<Var<'_>> {
    let a = t.value();
    check_axis(a.shape(), axis)?;
    let (outer, n, inner) = axis_blocks(a.shape(), axis);
    let x = a.data();
    let mut out = vec![0.0; a.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            let max = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..n {
                let e = (x[at(i)] - max).exp();
                out[at(i)] = e;
                z += e;
            }
            for i in 0..n {
                out[at(i)] /= z;
            }
        }
    }
    let v = Tensor::new(a.shape().to_vec(), out)?;
    Ok(t.graph.push(v, Op::Softmax { input: t.id, axis }, &[t.id]))
}

/// Elementwise `atan2(y, x)` in (−π, π].
///
/// Fails with [`Error::DegenerateDirection`] when any `(x, y)` pair is
/// shorter than [`ATAN2_EPS`].
pub fn atan2<'g>(y: Var<'g>, x: Var<'g>) -> Result<Var<'g>> {
    y.same_graph(x);
    let (yv, xv) = (y.value(), x.value());
    if yv.shape() != xv.shape() {
        return Err(Error::dim(format!("atan2: {:?} vs {:?}", yv.shape(), xv.shape())));
    }
    let mut out = Vec::with_capacity(yv.len());
    for (&yy, &xx) in yv.data().iter().zip(xv.data()) {
        let magnitude = yy.hypot(xx);
        if !(magnitude >= ATAN2_EPS) {
            return Err(Error::DegenerateDirection { magnitude, eps: ATAN2_EPS });
        }
        out.push(yy.atan2(xx));
    }
    let v = Tensor::new(yv.shape().to_vec(), out)?;
    Ok(y.graph.push(v, Op::Atan2 { y: y.id, x: x.id }, &[y.id, x.id]))
}

/// Summed smooth-L1 (Huber with slope 1) between `pred` and `target`.
pub fn smooth_l1<'g>(pred: Var<'g>, target: Var<'g>, beta: f64) -> Result<Var<'g>> {
    pred.same_graph(target);
    if !(beta > 0.0) {
        return Err(Error::Contract(format!("smooth_l1 beta must be positive, got {beta}")));
    }
    let (p, t) = (pred.value(), target.value());
    if p.shape() != t.shape() {
        return Err(Error::dim(format!("smooth_l1: {:?} vs {:?}", p.shape(), t.shape())));
    }
    let loss: f64 = p.data().iter().zip(t.data()).map(|(a, b)| smooth_l1_scalar(a - b, beta)).sum();
    Ok(pred.graph.push(
        Tensor::scalar(loss),
        Op::SmoothL1 { pred: pred.id, target: target.id, beta },
        &[pred.id, target.id],
    ))
}

pub fn smooth_l1_scalar(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

/// `−log softmax(logits)[label]`, computed through log-sum-exp.
pub fn cross_entropy_logits(logits: Var<'_>, label: usize) -> Result<Var<'_>> {
    let x = logits.value();
    if x.rank() != 1 {
        return Err(Error::dim(format!("cross_entropy expects a vector, got {:?}", x.shape())));
    }
    if label >= x.len() {
        return Err(Error::Index { index: label, extent: x.len() });
    }
    let (arg, max) = x
        .data()
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    // log(1 + rest) keeps precision when one logit dominates
    let rest: f64 = x
        .data()
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    let loss = (max - x.data()[label]) + rest.ln_1p();
    Ok(logits.graph.push(
        Tensor::scalar(loss),
        Op::CrossEntropy { logits: logits.id, label },
        &[logits.id],
    ))
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| {
        first.same_graph(*p);
        p.value()
    }).collect();
    let s0 = values[0].shape().to_vec();
    check_axis(&s0, axis)?;
    let mut total = 0;
    for v in &values {
        let s = v.shape();
        let agree = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !agree {
            return Err(Error::dim(format!("concat: {s:?} incompatible with {s0:?} on axis {axis}")));
        }
        total += s[axis];
    }
    let (outer, _, inner) = axis_blocks(&s0, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let n = v.shape()[axis];
            out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = s0;
    shape[axis] = total;
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    let v = Tensor::new(shape, out)?;
    Ok(first.graph.push(v, Op::Concat { inputs: ids.clone(), axis }, &ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn mat<'g>(g: &'g Graph, shape: &[usize], data: &[f64]) -> Var<'g> {
        g.param(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn tensordot_identity_contraction() {
        let g = Graph::new();
        let a = mat(&g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = mat(&g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let c = a.tensordot(b, &[(1, 0)]).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tensordot_vector_dot() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let c = a.tensordot(a, &[(0, 0)]).unwrap();
        assert_eq!(c.shape(), Vec::<usize>::new());
        assert_eq!(c.item(), 14.0);
    }

    #[test]
    fn tensordot_zero_annihilates() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::from_vec(vec![1.5, -2.0, 7.0, 3.0]));
        let c = a.tensordot(b, &[(1, 0)]).unwrap();
        assert!(c.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tensordot_shape_mismatch() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.tensordot(b, &[(1, 0)]), Err(Error::Dimension(_))));
    }

    #[test]
    fn tensordot_output_axis_order() {
        let g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let b = g.constant(Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap());
        // contract a.0 with b.1 -> [3, 4]
        let c = a.tensordot(b, &[(0, 1)]).unwrap();
        assert_eq!(c.shape(), vec![3, 4]);
        let (av, bv, cv) = (a.value(), b.value(), c.value());
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|k| av.at(&[k, i]) * bv.at(&[j, k])).sum();
                assert_eq!(cv.at(&[i, j]), want);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let s = g.constant(Tensor::from_vec(vec![0.0, 0.0])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = g.constant(Tensor::from_vec(vec![1f64.ln(), 3f64.ln()])).softmax(0).unwrap();
        assert!((s.value().data()[0] - 0.25).abs() < 1e-15);
        assert!((s.value().data()[1] - 0.75).abs() < 1e-15);
        let a = g.constant(Tensor::from_vec(vec![0.0, 1.7])).softmax(0).unwrap();
        let b = g.constant(Tensor::from_vec(vec![5.0, 6.7])).softmax(0).unwrap();
        for (x, y) in a.value().data().iter().zip(b.value().data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(g.constant(Tensor::from_vec(vec![1.0])).softmax(1).is_err());
    }

    #[test]
    fn atan2_examples() {
        let g = Graph::new();
        let s = |v: f64| g.param(Tensor::scalar(v));
        assert_eq!(atan2(s(0.0), s(1.0)).unwrap().item(), 0.0);
        assert_eq!(atan2(s(1.0), s(0.0)).unwrap().item(), PI / 2.0);
        let (y, x) = (s(1.0), s(1.0));
        let t = atan2(y, x).unwrap();
        assert!((t.item() - PI / 4.0).abs() < 1e-15);
        let grads = g.backward(t).unwrap();
        assert!((grads.get(y).unwrap().item() - 0.5).abs() < 1e-15);
        assert!((grads.get(x).unwrap().item() + 0.5).abs() < 1e-15);
        assert!(matches!(atan2(s(1e-13), s(0.0)), Err(Error::DegenerateDirection { .. })));
        assert_eq!(atan2(s(0.0), s(-1.0)).unwrap().item(), PI);
    }

    #[test]
    fn smooth_l1_examples() {
        let g = Graph::new();
        let v = |x: f64| g.constant(Tensor::from_vec(vec![x]));
        assert_eq!(smooth_l1(v(0.0), v(0.0), 1.0).unwrap().item(), 0.0);
        assert_eq!(smooth_l1(v(0.5), v(0.0), 1.0).unwrap().item(), 0.125);
        assert_eq!(smooth_l1(v(2.0), v(0.0), 1.0).unwrap().item(), 1.5);
        let two = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(smooth_l1(v(0.0), two, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::new();
        let l = |a: f64, b: f64, label| {
            cross_entropy_logits(g.constant(Tensor::from_vec(vec![a, b])), label).unwrap().item()
        };
        assert!((l(0.0, 0.0, 0) - 2f64.ln()).abs() < 1e-15);
        let small = l(10.0, -10.0, 0);
        // log(1 + e^-20) = 2.0611536203143...e-9 (30-digit reference)
        assert!((small - 2.061153620314381e-9).abs() < 1e-21, "{small}");
        assert!((l(0.3, -1.2, 1) - l(100.3, 98.8, 1)).abs() < 1e-12);
        let logits = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        assert!(matches!(cross_entropy_logits(logits, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let g = Graph::new();
        let w = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let grads = g.backward(w.sum()).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_repeated_leaf() {
        let g = Graph::new();
        let w = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let single = g.backward(w.sin().sum()).unwrap().get(w).unwrap().clone();
        let mut acc = w.sin();
        for _ in 1..4 {
            acc = acc.add(w.sin()).unwrap();
        }
        let grads = g.backward(acc.sum()).unwrap();
        assert_eq!(grads.get(w).unwrap(), &single.scale(4.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_primitives() {
        let g = Graph::new();
        let t = g.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        assert_eq!(t.flip(1).unwrap().value().data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(t.slice_wrap(1, -1, 2).unwrap().value().data(), &[2.0, 0.0, 5.0, 3.0]);
        assert_eq!(t.slice_wrap(1, 2, 3).unwrap().value().data(), &[2.0, 0.0, 1.0, 5.0, 3.0, 4.0]);
        assert_eq!(t.select(0, 1).unwrap().value().data(), &[3.0, 4.0, 5.0]);
        assert_eq!(t.sum_axis(0).unwrap().value().data(), &[3.0, 5.0, 7.0]);
        let c = concat(&[t, t.slice_wrap(1, 0, 1).unwrap()], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 4]);
        assert_eq!(c.value().data(), &[0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 5.0, 3.0]);
        assert!(matches!(t.select(1, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let g = Graph::new();
        let x = Tensor::new(vec![1, 3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::ones(&[2, 2, 1, 1]);
        let y = g.constant(x).conv2d(g.constant(w), 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2, 1]);
        assert_eq!(y.value().data(), &[12.0, 16.0, 24.0, 28.0]);
    }
}
