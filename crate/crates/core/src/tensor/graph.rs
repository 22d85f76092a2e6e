use std::cell::{Cell, Ref, RefCell};

use super::kernels::{self, PatchSpec};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// `√(2/π)` in the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;
/// Variance floor inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    MatMul { a: usize, b: usize },
    TransposeLast(usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Sigmoid(usize),
    Gelu(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    GatherRows { x: usize, indices: Vec<usize> },
    Im2Col { x: usize, spec: PatchSpec },
    Upsample { x: usize, in_hw: (usize, usize) },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Operation tape. Nodes are appended in creation order and never removed.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    macs: Cell<u64>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// All parameters of a [`ParamStore`] registered as leaves of one graph.
pub struct Bound<'g> {
    graph: &'g Graph,
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, id: ParamId) -> Var<'g> {
        self.vars[id.index()]
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), macs: Cell::new(0) }
    }

    /// Multiply-accumulate count of all matrix products recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false, None)
    }

    /// A free input that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true, None)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push_leaf(store.get(id).clone(), true, Some(id))
    }

    pub fn bind(&self, store: &ParamStore) -> Bound<'_> {
        Bound { graph: self, vars: store.ids().map(|id| self.param(store, id)).collect() }
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad, param });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node { value, op, requires_grad, param: None });
        Ok(Var { graph: self, id: nodes.len() - 1 })
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.push((id, node.param, Tensor { shape: node.value.shape().to_vec(), data: g }));
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        leaves.sort_by_key(|(id, _, _)| *id);
        Ok(Gradients { leaves })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib),
    }
}

/// Reduce an output-shaped gradient onto an operand broadcast over leading axes.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, reduce_to(g, val(*a).numel()));
            accumulate(nodes, grads, *b, reduce_to(g, val(*b).numel()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, reduce_to(g, val(*a).numel()));
            let mut gb = reduce_to(g, val(*b).numel());
            gb.iter_mut().for_each(|v| *v = -*v);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let (la, lb) = (av.len(), bv.len());
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, reduce_to(&broadcast_zip(g, bv, |g, b| g * b), la));
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, reduce_to(&broadcast_zip(g, av, |g, a| g * a), lb));
            }
        }
        Op::Affine(x, s) => accumulate(nodes, grads, *x, g.iter().map(|v| v * s).collect()),
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let dims = matmul_dims(av.shape(), bv.shape()).expect("validated in forward");
            let (m, k, n) = (dims.m, dims.k, dims.n);
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; av.numel()];
                for bi in 0..dims.batch {
                    let a_off = if dims.a_batched { bi * m * k } else { 0 };
                    let b_off = if dims.b_batched { bi * k * n } else { 0 };
                    kernels::gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv.data()[b_off..b_off + k * n],
                        &mut ga[a_off..a_off + m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; bv.numel()];
                for bi in 0..dims.batch {
                    let a_off = if dims.a_batched { bi * m * k } else { 0 };
                    let b_off = if dims.b_batched { bi * k * n } else { 0 };
                    kernels::gemm_tn(
                        &av.data()[a_off..a_off + m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[b_off..b_off + k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::TransposeLast(x) => {
            let s = out.shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = out.numel() / (r * c);
            accumulate(nodes, grads, *x, kernels::transpose_batched(g, batch, r, c));
        }
        Op::Permute(x, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            accumulate(nodes, grads, *x, kernels::permute(g, out.shape(), &inverse));
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Sigmoid(x) => {
            let y = out.data();
            accumulate(nodes, grads, *x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect());
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            accumulate(
                nodes,
                grads,
                *x,
                g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            );
        }
        Op::Log(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, g.iter().zip(xv).map(|(g, x)| g / x).collect());
        }
        Op::Exp(x) => {
            let y = out.data();
            accumulate(nodes, grads, *x, g.iter().zip(y).map(|(g, y)| g * y).collect());
        }
        Op::Square(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, g.iter().zip(xv).map(|(g, x)| 2.0 * g * x).collect());
        }
        Op::Abs(x) => {
            let xv = val(*x).data();
            accumulate(
                nodes,
                grads,
                *x,
                g.iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect(),
            );
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, vec![g[0]; val(*x).numel()]),
        Op::Mean(x) => {
            let n = val(*x).numel();
            accumulate(nodes, grads, *x, vec![g[0] / n as f64; n]);
        }
        Op::Softmax(x) => {
            let y = out.data();
            let w = *out.shape().last().unwrap_or(&1);
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                let s = kernels::dot(yr, gr);
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - s);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::LayerNorm { x, inv_std } => {
            let xhat = out.data();
            let w = *out.shape().last().unwrap_or(&1);
            let mut gx = vec![0.0; xhat.len()];
            for (r, ((xr, gr), dr)) in xhat.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)).enumerate() {
                let mean_g = gr.iter().sum::<f64>() / w as f64;
                let mean_gx = kernels::dot(gr, xr) / w as f64;
                for ((d, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                    *d = inv_std[r] * (gv - mean_g - xv * mean_gx);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &i in inputs {
                let ext = val(i).shape()[*axis] * inner;
                if nodes[i].requires_grad {
                    let mut gi = Vec::with_capacity(outer * ext);
                    for o in 0..outer {
                        gi.extend_from_slice(&g[o * total + offset..o * total + offset + ext]);
                    }
                    accumulate(nodes, grads, i, gi);
                }
                offset += ext;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = val(*x).shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let total = in_shape[*axis] * inner;
            let ext = out.shape()[*axis] * inner;
            let mut gx = vec![0.0; val(*x).numel()];
            for o in 0..outer {
                gx[o * total + start * inner..o * total + start * inner + ext]
                    .copy_from_slice(&g[o * ext..(o + 1) * ext]);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::GatherRows { x, indices } => {
            let w = val(*x).row_width();
            let mut gx = vec![0.0; val(*x).numel()];
            for (r, &i) in indices.iter().enumerate() {
                gx[i * w..(i + 1) * w]
                    .iter_mut()
                    .zip(&g[r * w..(r + 1) * w])
                    .for_each(|(d, s)| *d += s);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Im2Col { x, spec } => {
            let mut gx = vec![0.0; val(*x).numel()];
            spec.for_each_tap(|dst, src| gx[src] += g[dst]);
            accumulate(nodes, grads, *x, gx);
        }
        Op::Upsample { x, in_hw } => {
            let s = out.shape();
            let (ho, wo, c) = (s[0], s[1], s[2]);
            let (hi, wi) = *in_hw;
            let ty = kernels::bilinear_taps(hi, ho);
            let tx = kernels::bilinear_taps(wi, wo);
            let mut gx = vec![0.0; val(*x).numel()];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let taps = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1, (1.0 - fy) * fx),
                        (y1, x0, fy * (1.0 - fx)),
                        (y1, x1, fy * fx),
                    ];
                    let go = &g[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                    for (yy, xx, wgt) in taps {
                        let dst = &mut gx[(yy * wi + xx) * c..(yy * wi + xx + 1) * c];
                        dst.iter_mut().zip(go).for_each(|(d, v)| *d += wgt * v);
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", format!("operands need ≥2 axes: {a:?} · {b:?}")));
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(Error::shape("matmul", format!("inner extents differ: {a:?} · {b:?}")));
    }
    let batch_shape = if ab == bb || bb.is_empty() {
        ab
    } else if ab.is_empty() {
        bb
    } else {
        return Err(Error::shape("matmul", format!("batch extents differ: {a:?} · {b:?}")));
    };
    let mut out_shape = batch_shape.to_vec();
    out_shape.extend([am[0], bm[1]]);
    Ok(MatMulDims {
        batch: batch_shape.iter().product(),
        m: am[0],
        k: am[1],
        n: bm[1],
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        out_shape,
    })
}

/// `f(a, b)` elementwise, repeating the shorter operand over the longer one.
fn broadcast_zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if a.len() == b.len() {
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
    } else if a.len() > b.len() {
        for chunk in a.chunks(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for chunk in b.chunks(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

/// Output shape of a binary elementwise op where one operand may repeat over
/// the leading axes of the other.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
    }
    Ok(long.to_vec())
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    fn elementwise(
        self,
        rhs: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        let out = {
            let (a, b) = (self.value(), rhs.value());
            let shape = broadcast_shape(name, a.shape(), b.shape())?;
            Tensor { shape, data: broadcast_zip(a.data(), b.data(), f) }
        };
        self.graph.push(name, out, op, &[self.id, rhs.id])
    }

    fn map(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            Tensor { shape: x.shape().to_vec(), data: x.data().iter().map(|&v| f(v)).collect() }
        };
        self.graph.push(name, out, op, &[self.id])
    }

    /// Elementwise sum; `rhs` may repeat over the leading axes of `self` or vice versa.
    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        self.affine(s, 0.0)
    }

    /// `s·x + shift`
    pub fn affine(self, s: f64, shift: f64) -> Result<Var<'g>> {
        self.map("affine", |v| s * v + shift, Op::Affine(self.id, s))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.map("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'g>> {
        self.map("gelu", gelu, Op::Gelu(self.id))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.map("relu", |v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn log(self) -> Result<Var<'g>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain { op: "log", msg: format!("non-positive input {bad}") });
        }
        self.map("log", f64::ln, Op::Log(self.id))
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.map("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.map("square", |v| v * v, Op::Square(self.id))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(self) -> Result<Var<'g>> {
        self.map("abs", f64::abs, Op::Abs(self.id))
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.value().data().iter().sum();
        self.graph.push("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let m = {
            let v = self.value();
            if v.numel() == 0 {
                return Err(Error::shape("mean", "mean of an empty tensor"));
            }
            v.data().iter().sum::<f64>() / v.numel() as f64
        };
        self.graph.push("mean", Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(self) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let w = *x.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
            if w == 0 {
                return Err(Error::shape("softmax", "empty last axis"));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(w) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor { shape: x.shape().to_vec(), data }
        };
        self.graph.push("softmax", out, Op::Softmax(self.id), &[self.id])
    }

    /// Normalize each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm(self) -> Result<Var<'g>> {
        let (out, inv_std) = {
            let x = self.value();
            let w = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
            let mut data = x.data().to_vec();
            let mut inv_std = Vec::with_capacity(data.len() / w.max(1));
            for row in data.chunks_mut(w) {
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                inv_std.push(inv);
            }
            (Tensor { shape: x.shape().to_vec(), data }, inv_std)
        };
        self.graph.push("layer_norm", out, Op::LayerNorm { x: self.id, inv_std }, &[self.id])
    }

    /// Batched matrix product over the last two axes. Batch extents must be equal,
    /// or one operand must be a plain matrix shared across the batch.
    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let out = {
            let (a, b) = (self.value(), rhs.value());
            let d = matmul_dims(a.shape(), b.shape())?;
            let mut c = vec![0.0; d.batch * d.m * d.n];
            for bi in 0..d.batch {
                let a_off = if d.a_batched { bi * d.m * d.k } else { 0 };
                let b_off = if d.b_batched { bi * d.k * d.n } else { 0 };
                kernels::gemm_nn(
                    &a.data()[a_off..a_off + d.m * d.k],
                    &b.data()[b_off..b_off + d.k * d.n],
                    &mut c[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                    d.m,
                    d.k,
                    d.n,
                );
            }
            self.graph.macs.set(self.graph.macs.get() + (d.batch * d.m * d.k * d.n) as u64);
            Tensor { shape: d.out_shape, data: c }
        };
        self.graph.push("matmul", out, Op::MatMul { a: self.id, b: rhs.id }, &[self.id, rhs.id])
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let s = x.shape();
            if s.len() < 2 {
                return Err(Error::shape("transpose", format!("need ≥2 axes, got {s:?}")));
            }
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = x.numel() / (r * c).max(1);
            let mut shape = s.to_vec();
            let n = shape.len();
            shape.swap(n - 2, n - 1);
            Tensor { shape, data: kernels::transpose_batched(x.data(), batch, r, c) }
        };
        self.graph.push("transpose", out, Op::TransposeLast(self.id), &[self.id])
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let mut seen = vec![false; x.ndim()];
            if axes.len() != x.ndim() || axes.iter().any(|&a| a >= x.ndim() || std::mem::replace(&mut seen[a], true)) {
                return Err(Error::shape("permute", format!("{axes:?} is not a permutation of {:?}", x.shape())));
            }
            let shape = axes.iter().map(|&a| x.shape()[a]).collect();
            Tensor { shape, data: kernels::permute(x.data(), x.shape(), axes) }
        };
        self.graph.push("permute", out, Op::Permute(self.id, axes.to_vec()), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.to_tensor().reshape(shape.to_vec())?;
        self.graph.push("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let graph = first.graph;
        let out = {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let base = values[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
            }
            let mut shape = base.clone();
            shape[axis] = 0;
            for v in &values {
                let s = v.shape();
                let ok = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !ok {
                    return Err(Error::shape("concat", format!("extent mismatch {s:?} vs {base:?}")));
                }
                shape[axis] += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in &values {
                    let ext = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * ext..(o + 1) * ext]);
                }
            }
            Tensor { shape, data }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        graph.push("concat", out, Op::Concat { inputs: ids.clone(), axis }, &ids)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let s = x.shape();
            if axis >= s.len() || start + len > s[axis] {
                return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let total = s[axis] * inner;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&x.data()[o * total + start * inner..o * total + (start + len) * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor { shape, data }
        };
        self.graph.push("slice", out, Op::Slice { x: self.id, axis, start }, &[self.id])
    }

    /// Select rows along the leading axis; repeated indices accumulate gradient.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'g>> {
        let out = self.value().gather_rows(indices)?;
        self.graph.push(
            "gather_rows",
            out,
            Op::GatherRows { x: self.id, indices: indices.to_vec() },
            &[self.id],
        )
    }

    /// Extract `kernel×kernel` patches from an `[H, W, C]` map into
    /// `[H_out·W_out, kernel·kernel·C]`, zero padded.
    pub fn im2col(self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (out, spec) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 3 || kernel == 0 || stride == 0 || s[0] + 2 * pad < kernel || s[1] + 2 * pad < kernel {
                return Err(Error::shape("im2col", format!("bad input {s:?} for kernel {kernel}")));
            }
            let spec = PatchSpec { height: s[0], width: s[1], channels: s[2], kernel, stride, pad };
            let rows = spec.out_height() * spec.out_width();
            let mut data = vec![0.0; rows * spec.patch_len()];
            let src = x.data();
            spec.for_each_tap(|dst, s| data[dst] = src[s]);
            (Tensor { shape: vec![rows, spec.patch_len()], data }, spec)
        };
        self.graph.push("im2col", out, Op::Im2Col { x: self.id, spec }, &[self.id])
    }

    /// Bilinear resize of an `[H, W, C]` map; output sample `i` reads input
    /// coordinate `i · H/H_out`, clamped at the border.
    pub fn upsample_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'g>> {
        let (out, in_hw) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 3 || s[0] == 0 || s[1] == 0 || out_h == 0 || out_w == 0 {
                return Err(Error::shape("upsample_bilinear", format!("bad input {s:?}")));
            }
            let (hi, wi, c) = (s[0], s[1], s[2]);
            let ty = kernels::bilinear_taps(hi, out_h);
            let tx = kernels::bilinear_taps(wi, out_w);
            let src = x.data();
            let mut data = vec![0.0; out_h * out_w * c];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let dst = &mut data[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                    for ch in 0..c {
                        let p = |yy: usize, xx: usize| src[(yy * wi + xx) * c + ch];
                        dst[ch] = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                            + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                    }
                }
            }
            (Tensor { shape: vec![out_h, out_w, c], data }, (hi, wi))
        };
        self.graph.push("upsample_bilinear", out, Op::Upsample { x: self.id, in_hw }, &[self.id])
    }
}

/// Gradients of one backward sweep, held for every leaf that requires them.
pub struct Gradients {
    leaves: Vec<(usize, Option<ParamId>, Tensor)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves
            .binary_search_by_key(&var.id, |(id, _, _)| *id)
            .ok()
            .map(|i| &self.leaves[i].2)
    }

    /// Gradient for every parameter of `store`, zero where the loss does not depend on it.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        for (_, param, g) in &self.leaves {
            if let Some(p) = param {
                let dst = out[p.index()].data_mut();
                dst.iter_mut().zip(g.data()).for_each(|(d, s)| *d += s);
            }
        }
        out
    }
}
