//! Define-by-run tape. Every op records its parents; [`Graph::backward`]
//! walks the tape in reverse creation order.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, ConvDims, ConvGeom};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Sin,
    Cos,
    Abs,
    Sqr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Batch,
    Channel,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::Batch => 0,
            Axis::Channel => 1,
        }
    }
}

/// `(outer, mid, inner)` split of a shape around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Unary(usize, Unary),
    SumAll(usize),
    MeanAll(usize),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        dims: ConvDims,
        geom: ConvGeom,
        transposed: bool,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Cat {
        parts: Vec<usize>,
        axis: Axis,
    },
    Slice {
        x: usize,
        start: usize,
        axis: Axis,
    },
    ChannelScale {
        x: usize,
        s: usize,
    },
    DotVec {
        map: usize,
        v: usize,
    },
    Broadcast {
        v: usize,
    },
    Normalize {
        x: usize,
        norms: Vec<T>,
    },
    GlobalAvgPool(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Upsample2(usize),
    AvgPool2(usize),
    Reshape(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Create one per forward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    id: usize,
    graph: &'g Graph<T>,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.get_id(v.id)
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take_id(&mut self, id: usize) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(512)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant that never receives gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by `backward`.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { id: nodes.len() - 1, graph: self }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Reverse-mode sweep seeded with ones at `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let root_shape = nodes[root.id].value.shape().to_vec();
        grads[root.id] = Some(Tensor::full(root_shape, T::one()));
        let acc = |grads: &mut Vec<Option<Tensor<T>>>, id: usize, delta: Tensor<T>| {
            if !nodes[id].needs_grad {
                return;
            }
            match &mut grads[id] {
                Some(g) => g.data_mut().iter_mut().zip(delta.data()).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
            let need = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.zip_map(val(*b), |gv, bv| gv * bv));
                    }
                    if need(*b) {
                        acc(&mut grads, *b, g.zip_map(val(*a), |gv, av| gv * av));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.map(|v| v * c));
                }
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let y = &node.value;
                    let two = T::cst(2.0);
                    let d = match kind {
                        Unary::Relu => g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
                        Unary::Tanh => g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv)),
                        Unary::Sigmoid => g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)),
                        Unary::Sin => g.zip_map(x, |gv, xv| gv * xv.cos()),
                        Unary::Cos => g.zip_map(x, |gv, xv| -gv * xv.sin()),
                        Unary::Abs => g.zip_map(x, |gv, xv| {
                            if xv > T::zero() {
                                gv
                            } else if xv < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        }),
                        Unary::Sqr => g.zip_map(x, |gv, xv| two * gv * xv),
                    };
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let s = g.item();
                    acc(&mut grads, *a, Tensor::full(val(*a).shape().to_vec(), s));
                }
                Op::MeanAll(a) => {
                    let x = val(*a);
                    let s = g.item() / T::cst(x.numel() as f64);
                    acc(&mut grads, *a, Tensor::full(x.shape().to_vec(), s));
                }
                Op::Conv { x, w, b, dims, geom, transposed } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let mut dx = need(*x).then(|| vec![T::zero(); xv.numel()]);
                    let mut dw = need(*w).then(|| vec![T::zero(); wv.numel()]);
                    let mut db = b.filter(|&bi| need(bi)).map(|_| vec![T::zero(); dims.cout]);
                    let f = if *transposed {
                        kernels::conv_transpose2d_backward
                    } else {
                        kernels::conv2d_backward
                    };
                    f(
                        xv.data(),
                        wv.data(),
                        g.data(),
                        *dims,
                        *geom,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                    }
                    if let Some(dw) = dw {
                        acc(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw));
                    }
                    if let (Some(bi), Some(db)) = (b, db) {
                        acc(&mut grads, *bi, Tensor::new(vec![dims.cout], db));
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let (n, c, h, w) = node.value.dims4();
                    let plane = h * w;
                    let m = T::cst((n * plane) as f64);
                    let gam = val(*gamma).data().to_vec();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            for p in 0..plane {
                                let gv = g.data()[off + p];
                                dbeta[ch] += gv;
                                dgamma[ch] += gv * xhat[off + p];
                            }
                        }
                    }
                    if need(*x) {
                        let mut dx = vec![T::zero(); g.numel()];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * plane;
                                let k = gam[ch] * inv_std[ch] / m;
                                for p in 0..plane {
                                    dx[off + p] = k
                                        * (m * g.data()[off + p] - dbeta[ch] - xhat[off + p] * dgamma[ch]);
                                }
                            }
                        }
                        acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), dx));
                    }
                    acc(&mut grads, *gamma, Tensor::new(vec![c], dgamma));
                    acc(&mut grads, *beta, Tensor::new(vec![c], dbeta));
                }
                Op::ChannelAffine { x, gamma, beta, xhat, inv_std } => {
                    let (n, c, h, w) = node.value.dims4();
                    let plane = h * w;
                    let gam = val(*gamma).data().to_vec();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let mut dx = vec![T::zero(); g.numel()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            for p in 0..plane {
                                let gv = g.data()[off + p];
                                dbeta[ch] += gv;
                                dgamma[ch] += gv * xhat[off + p];
                                dx[off + p] = gv * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), dx));
                    acc(&mut grads, *gamma, Tensor::new(vec![c], dgamma));
                    acc(&mut grads, *beta, Tensor::new(vec![c], dbeta));
                }
                Op::Cat { parts, axis } => {
                    let ax = axis.index();
                    let (outer, total, inner) = split(g.shape(), ax);
                    let mut start = 0;
                    for &p in parts {
                        let pv = val(p);
                        let mid = pv.shape()[ax];
                        if need(p) {
                            let mut d = Vec::with_capacity(pv.numel());
                            for o in 0..outer {
                                let base = (o * total + start) * inner;
                                d.extend_from_slice(&g.data()[base..base + mid * inner]);
                            }
                            acc(&mut grads, p, Tensor::new(pv.shape().to_vec(), d));
                        }
                        start += mid;
                    }
                }
                Op::Slice { x, start, axis } => {
                    let xv = val(*x);
                    let ax = axis.index();
                    let (outer, total, inner) = split(xv.shape(), ax);
                    let mid = g.shape()[ax];
                    let mut d = vec![T::zero(); xv.numel()];
                    for o in 0..outer {
                        let dst = (o * total + start) * inner;
                        let src = o * mid * inner;
                        d[dst..dst + mid * inner].copy_from_slice(&g.data()[src..src + mid * inner]);
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d));
                }
                Op::ChannelScale { x, s } => {
                    let xv = val(*x);
                    let sv = val(*s);
                    let (n, c, h, w) = xv.dims4();
                    let plane = h * w;
                    if need(*x) {
                        let mut dx = vec![T::zero(); xv.numel()];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * plane;
                                for p in 0..plane {
                                    dx[off + p] = g.data()[off + p] * sv.data()[b * plane + p];
                                }
                            }
                        }
                        acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                    }
                    if need(*s) {
                        let mut ds = vec![T::zero(); sv.numel()];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * plane;
                                for p in 0..plane {
                                    ds[b * plane + p] += g.data()[off + p] * xv.data()[off + p];
                                }
                            }
                        }
                        acc(&mut grads, *s, Tensor::new(sv.shape().to_vec(), ds));
                    }
                }
                Op::DotVec { map, v } => {
                    let mv = val(*map);
                    let vv = val(*v);
                    let (n, c, h, w) = mv.dims4();
                    let plane = h * w;
                    if need(*map) {
                        let mut dm = vec![T::zero(); mv.numel()];
                        for b in 0..n {
                            for ch in 0..c {
                                let k = vv.data()[b * c + ch];
                                let off = (b * c + ch) * plane;
                                for p in 0..plane {
                                    dm[off + p] = g.data()[b * plane + p] * k;
                                }
                            }
                        }
                        acc(&mut grads, *map, Tensor::new(mv.shape().to_vec(), dm));
                    }
                    if need(*v) {
                        let mut dv = vec![T::zero(); n * c];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * plane;
                                let mut s = T::zero();
                                for p in 0..plane {
                                    s += g.data()[b * plane + p] * mv.data()[off + p];
                                }
                                dv[b * c + ch] = s;
                            }
                        }
                        acc(&mut grads, *v, Tensor::new(vec![n, c], dv));
                    }
                }
                Op::Broadcast { v } => {
                    let (n, c, h, w) = g.dims4();
                    let plane = h * w;
                    let dv: Vec<T> = g.data().chunks(plane).map(|ch| ch.iter().copied().sum()).collect();
                    acc(&mut grads, *v, Tensor::new(vec![n, c], dv));
                }
                Op::Normalize { x, norms } => {
                    let y = &node.value;
                    let (n, c, h, w) = y.dims4();
                    let plane = h * w;
                    let mut dx = vec![T::zero(); y.numel()];
                    for b in 0..n {
                        for p in 0..plane {
                            let r = norms[b * plane + p];
                            let mut dot = T::zero();
                            for ch in 0..c {
                                let i = (b * c + ch) * plane + p;
                                dot += y.data()[i] * g.data()[i];
                            }
                            for ch in 0..c {
                                let i = (b * c + ch) * plane + p;
                                dx[i] = (g.data()[i] - y.data()[i] * dot) / r;
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx));
                }
                Op::GlobalAvgPool(x) => {
                    let xv = val(*x);
                    let (_, _, h, w) = xv.dims4();
                    let plane = h * w;
                    let inv = T::one() / T::cst(plane as f64);
                    let mut dx = Vec::with_capacity(xv.numel());
                    for &gv in g.data() {
                        dx.extend(std::iter::repeat_n(gv * inv, plane));
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                }
                Op::Linear { x, w, b } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (n, fin) = xv.dims2();
                    let (fout, _) = wv.dims2();
                    if need(*x) {
                        let mut dx = vec![T::zero(); n * fin];
                        crate::tensor::gemm(n, fout, fin, g.data(), false, wv.data(), false, &mut dx, false);
                        acc(&mut grads, *x, Tensor::new(vec![n, fin], dx));
                    }
                    if need(*w) {
                        let mut dw = vec![T::zero(); fout * fin];
                        crate::tensor::gemm(fout, n, fin, g.data(), true, xv.data(), false, &mut dw, false);
                        acc(&mut grads, *w, Tensor::new(vec![fout, fin], dw));
                    }
                    if let Some(bi) = b.filter(|&bi| need(bi)) {
                        let mut db = vec![T::zero(); fout];
                        for row in g.data().chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                        acc(&mut grads, bi, Tensor::new(vec![fout], db));
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let (_, k) = y.dims2();
                    let mut dx = vec![T::zero(); y.numel()];
                    for ((dr, yr), gr) in dx.chunks_mut(k).zip(y.data().chunks(k)).zip(g.data().chunks(k)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for i in 0..k {
                            dr[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx));
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let lv = val(*logits);
                    let (n, k) = lv.dims2();
                    let s = g.item() / T::cst(n as f64);
                    let mut dx = probs.clone();
                    for (b, &t) in targets.iter().enumerate() {
                        dx[b * k + t] -= T::one();
                    }
                    dx.iter_mut().for_each(|v| *v *= s);
                    acc(&mut grads, *logits, Tensor::new(vec![n, k], dx));
                }
                Op::Upsample2(x) => {
                    let xv = val(*x);
                    let (n, c, h, w) = xv.dims4();
                    let mut dx = vec![T::zero(); xv.numel()];
                    let w2 = 2 * w;
                    for nc in 0..n * c {
                        for y in 0..2 * h {
                            for xx in 0..w2 {
                                dx[(nc * h + y / 2) * w + xx / 2] += g.data()[(nc * 2 * h + y) * w2 + xx];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                }
                Op::Reshape(x) => {
                    acc(&mut grads, *x, g.reshape(val(*x).shape().to_vec()));
                }
                Op::AvgPool2(x) => {
                    let xv = val(*x);
                    let (n, c, h, w) = xv.dims4();
                    let (ho, wo) = (h / 2, w / 2);
                    let q = T::cst(0.25);
                    let mut dx = vec![T::zero(); xv.numel()];
                    for nc in 0..n * c {
                        for y in 0..2 * ho {
                            for xx in 0..2 * wo {
                                dx[(nc * h + y) * w + xx] = q * g.data()[(nc * ho + y / 2) * wo + xx / 2];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                }
            }
        }
        // only leaves keep their gradient
        for (id, slot) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) && id != root.id {
                *slot = None;
            }
        }
        Gradients { grads }
    }
}

/// Running statistics produced by a training-mode batch norm.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    fn emit(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'g, T> {
        let needs = self.graph.needs(parents);
        self.graph.push(value, op, needs)
    }

    fn binary(self, other: Var<'g, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise op shape mismatch");
        self.emit(a.zip_map(&b, f), op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        self.emit(self.value().map(|v| v * c), Op::Scale(self.id, c), &[self.id])
    }

    pub fn offset(self, c: T) -> Var<'g, T> {
        self.emit(self.value().map(|v| v + c), Op::Offset(self.id), &[self.id])
    }

    fn unary(self, kind: Unary, f: impl Fn(T) -> T) -> Var<'g, T> {
        self.emit(self.value().map(f), Op::Unary(self.id, kind), &[self.id])
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(Unary::Relu, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(Unary::Tanh, |v| v.tanh())
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(Unary::Sigmoid, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn sin(self) -> Var<'g, T> {
        self.unary(Unary::Sin, |v| v.sin())
    }

    pub fn cos(self) -> Var<'g, T> {
        self.unary(Unary::Cos, |v| v.cos())
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(Unary::Abs, |v| v.abs())
    }

    pub fn sqr(self) -> Var<'g, T> {
        self.unary(Unary::Sqr, |v| v * v)
    }

    pub fn sum_all(self) -> Var<'g, T> {
        self.emit(Tensor::scalar(self.value().sum()), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let v = self.value();
        let m = v.sum() / T::cst(v.numel() as f64);
        self.emit(Tensor::scalar(m), Op::MeanAll(self.id), &[self.id])
    }

    /// Same value, cut from the tape.
    pub fn detach(self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    /// 2-D convolution; `weight` is `(cout, cin, k, k)`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let xv = self.value();
        let wv = weight.value();
        let (n, cin, h, w) = xv.dims4();
        let (cout, wcin, k, k2) = wv.dims4();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
        let geom = ConvGeom::new(k, stride, pad);
        let (ho, wo) = (
            geom.conv_out(h).expect("conv2d: kernel larger than input"),
            geom.conv_out(w).expect("conv2d: kernel larger than input"),
        );
        let dims = ConvDims { n, cin, h, w, cout, ho, wo };
        let bv = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(xv.data(), wv.data(), bv.as_deref().map(|b| b.data()), dims, geom);
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.emit(
            Tensor::new(vec![n, cout, ho, wo], out),
            Op::Conv { x: self.id, w: weight.id, b: bias.map(|b| b.id), dims, geom, transposed: false },
            &parents,
        )
    }

    /// Transposed 2-D convolution; `weight` is `(cin, cout, k, k)`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g, T> {
        let xv = self.value();
        let wv = weight.value();
        let (n, cin, h, w) = xv.dims4();
        let (wcin, cout, k, k2) = wv.dims4();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(cin, wcin, "conv_transpose2d: input has {cin} channels, weight expects {wcin}");
        let geom = ConvGeom::new(k, stride, pad);
        let ho = geom.convt_out(h).expect("conv_transpose2d: negative output size");
        let wo = geom.convt_out(w).expect("conv_transpose2d: negative output size");
        let dims = ConvDims { n, cin, h, w, cout, ho, wo };
        let bv = bias.map(|b| b.value());
        let out =
            kernels::conv_transpose2d_forward(xv.data(), wv.data(), bv.as_deref().map(|b| b.data()), dims, geom);
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.emit(
            Tensor::new(vec![n, cout, ho, wo], out),
            Op::Conv { x: self.id, w: weight.id, b: bias.map(|b| b.id), dims, geom, transposed: true },
            &parents,
        )
    }

    /// Batch normalisation with statistics of the current batch.
    pub fn batch_norm_train(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> (Var<'g, T>, BatchStats<T>) {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let m = n * plane;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                mean[ch] += xv.data()[off..off + plane].iter().copied().sum();
            }
        }
        let mt = T::cst(m as f64);
        mean.iter_mut().for_each(|v| *v = *v / mt);
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                var[ch] += xv.data()[off..off + plane].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum();
            }
        }
        let biased: Vec<T> = var.iter().map(|&v| v / mt).collect();
        let unbiased: Vec<T> = if m > 1 {
            var.iter().map(|&v| v / T::cst((m - 1) as f64)).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for p in 0..plane {
                    let xh = (xv.data()[off + p] - mean[ch]) * inv_std[ch];
                    xhat[off + p] = xh;
                    out[off + p] = gv.data()[ch] * xh + bv.data()[ch];
                }
            }
        }
        let y = self.emit(
            Tensor::new(xv.shape().to_vec(), out),
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
            &[self.id, gamma.id, beta.id],
        );
        (y, BatchStats { mean, var: unbiased })
    }

    /// Batch normalisation with frozen statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Var<'g, T> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for p in 0..plane {
                    let xh = (xv.data()[off + p] - mean[ch]) * inv_std[ch];
                    xhat[off + p] = xh;
                    out[off + p] = gv.data()[ch] * xh + bv.data()[ch];
                }
            }
        }
        self.emit(
            Tensor::new(xv.shape().to_vec(), out),
            Op::ChannelAffine { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
            &[self.id, gamma.id, beta.id],
        )
    }

    fn cat_axis(parts: &[Var<'g, T>], axis: Axis) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concatenation of nothing");
        let ax = axis.index();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut shape = values[0].shape().to_vec();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), shape.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&shape).enumerate() {
                assert!(d == ax || a == b, "concat: shape {:?} vs {:?} off axis {ax}", s, shape);
            }
            total += s[ax];
        }
        shape[ax] = total;
        let (outer, _, inner) = split(&shape, ax);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let mid = v.shape()[ax];
                data.extend_from_slice(&v.data()[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        parts[0].emit(Tensor::new(shape, data), Op::Cat { parts: ids.clone(), axis }, &ids)
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn cat_channels(parts: &[Var<'g, T>]) -> Var<'g, T> {
        Self::cat_axis(parts, Axis::Channel)
    }

    /// Concatenate along the batch axis (axis 0).
    pub fn cat_batch(parts: &[Var<'g, T>]) -> Var<'g, T> {
        Self::cat_axis(parts, Axis::Batch)
    }

    fn slice_axis(self, start: usize, len: usize, axis: Axis) -> Var<'g, T> {
        let xv = self.value();
        let ax = axis.index();
        let (outer, total, inner) = split(xv.shape(), ax);
        assert!(start + len <= total, "slice {start}+{len} out of range {total}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[ax] = len;
        self.emit(Tensor::new(shape, data), Op::Slice { x: self.id, start, axis }, &[self.id])
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Var<'g, T> {
        self.slice_axis(start, len, Axis::Channel)
    }

    pub fn slice_batch(self, start: usize, len: usize) -> Var<'g, T> {
        self.slice_axis(start, len, Axis::Batch)
    }

    /// `(b, c, h, w) * (b, 1, h, w)` broadcasting over channels.
    pub fn mul_channelwise(self, s: Var<'g, T>) -> Var<'g, T> {
        let xv = self.value();
        let sv = s.value();
        let (n, c, h, w) = xv.dims4();
        assert_eq!(sv.shape(), &[n, 1, h, w], "mul_channelwise: scale shape");
        let plane = h * w;
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for p in 0..plane {
                    out[off + p] = xv.data()[off + p] * sv.data()[b * plane + p];
                }
            }
        }
        self.emit(Tensor::new(xv.shape().to_vec(), out), Op::ChannelScale { x: self.id, s: s.id }, &[self.id, s.id])
    }

    /// Per-pixel dot product of a `(b, c, h, w)` map with a `(b, c)` vector.
    pub fn dot_channels(self, v: Var<'g, T>) -> Var<'g, T> {
        let mv = self.value();
        let vv = v.value();
        let (n, c, h, w) = mv.dims4();
        assert_eq!(vv.shape(), &[n, c], "dot_channels: vector shape");
        let plane = h * w;
        let mut out = vec![T::zero(); n * plane];
        for b in 0..n {
            for ch in 0..c {
                let k = vv.data()[b * c + ch];
                let off = (b * c + ch) * plane;
                for p in 0..plane {
                    out[b * plane + p] += mv.data()[off + p] * k;
                }
            }
        }
        self.emit(Tensor::new(vec![n, 1, h, w], out), Op::DotVec { map: self.id, v: v.id }, &[self.id, v.id])
    }

    /// Spread a `(b, c)` tensor into a constant `(b, c, h, w)` map.
    pub fn broadcast_map(self, h: usize, w: usize) -> Var<'g, T> {
        let vv = self.value();
        let (n, c) = vv.dims2();
        let mut out = Vec::with_capacity(n * c * h * w);
        for &v in vv.data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        self.emit(Tensor::new(vec![n, c, h, w], out), Op::Broadcast { v: self.id }, &[self.id])
    }

    /// Scale each pixel's channel vector to unit length.
    pub fn normalize_channels(self, eps: T) -> Var<'g, T> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let mut norms = vec![T::zero(); n * plane];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for p in 0..plane {
                    norms[b * plane + p] += xv.data()[off + p] * xv.data()[off + p];
                }
            }
        }
        norms.iter_mut().for_each(|r| *r = (*r + eps).sqrt());
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for p in 0..plane {
                    out[off + p] = xv.data()[off + p] / norms[b * plane + p];
                }
            }
        }
        self.emit(Tensor::new(xv.shape().to_vec(), out), Op::Normalize { x: self.id, norms }, &[self.id])
    }

    pub fn global_avg_pool(self) -> Var<'g, T> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let inv = T::one() / T::cst((h * w) as f64);
        let out: Vec<T> = xv.data().chunks(h * w).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        self.emit(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(self.id), &[self.id])
    }

    /// `x * w^T + b` with `w` of shape `(out, in)`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
        let xv = self.value();
        let wv = weight.value();
        let (n, fin) = xv.dims2();
        let (fout, wfin) = wv.dims2();
        assert_eq!(fin, wfin, "linear: input has {fin} features, weight expects {wfin}");
        let mut out = vec![T::zero(); n * fout];
        crate::tensor::gemm(n, fin, fout, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = bias {
            let bv = b.value();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.emit(
            Tensor::new(vec![n, fout], out),
            Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id) },
            &parents,
        )
    }

    /// Row-wise softmax of a `(n, k)` tensor.
    pub fn softmax(self) -> Var<'g, T> {
        let xv = self.value();
        let (_, k) = xv.dims2();
        let out = softmax_rows(xv.data(), k);
        self.emit(Tensor::new(xv.shape().to_vec(), out), Op::Softmax(self.id), &[self.id])
    }

    /// Mean softmax cross-entropy of `(n, k)` logits against class indices.
    pub fn cross_entropy(self, targets: &[usize]) -> Var<'g, T> {
        let xv = self.value();
        let (n, k) = xv.dims2();
        assert_eq!(targets.len(), n, "cross_entropy: one target per row");
        let probs = softmax_rows(xv.data(), k);
        let mut loss = T::zero();
        for (b, &t) in targets.iter().enumerate() {
            assert!(t < k, "cross_entropy: target {t} out of {k} classes");
            let row = &xv.data()[b * k..(b + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            loss += lse - row[t];
        }
        loss = loss / T::cst(n as f64);
        self.emit(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs },
            &[self.id],
        )
    }

    /// Nearest-neighbour upsampling by two.
    pub fn upsample2(self) -> Var<'g, T> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for nc in 0..n * c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[(nc * h2 + y) * w2 + x] = xv.data()[(nc * h + y / 2) * w + x / 2];
                }
            }
        }
        self.emit(Tensor::new(vec![n, c, h2, w2], out), Op::Upsample2(self.id), &[self.id])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g, T> {
        let v = (*self.value()).clone().reshape(shape);
        self.emit(v, Op::Reshape(self.id), &[self.id])
    }

    /// 2x2 average pooling (odd trailing rows/columns are dropped).
    pub fn avg_pool2(self) -> Var<'g, T> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let q = T::cst(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            for y in 0..ho {
                for x in 0..wo {
                    let at = |yy: usize, xx: usize| xv.data()[(nc * h + yy) * w + xx];
                    out[(nc * ho + y) * wo + x] =
                        q * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
                }
            }
        }
        self.emit(Tensor::new(vec![n, c, ho, wo], out), Op::AvgPool2(self.id), &[self.id])
    }
}

fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (o, row) in out.chunks_mut(k).zip(x.chunks(k)) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - mx).exp();
            s += *oi;
        }
        o.iter_mut().for_each(|v| *v = *v / s);
    }
    out
}
