//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradients of every leaf created with `requires_grad = true`. A graph is
//! meant to live for one forward/backward pass and then be dropped.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{col2im, gemm, im2col, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    AddScalar(usize),
    Abs(usize),
    Square(usize),
    Relu(usize),
    LeakyRelu(usize, f32),
    Tanh(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
    },
    Upsample2x(usize),
    InstanceNorm {
        x: usize,
        inv_std: Vec<f32>,
    },
    ChannelAffine {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    SpatialMean(usize),
    L2NormalizeRows {
        x: usize,
        norms: Vec<f32>,
    },
    Gram(usize),
    Gather {
        x: usize,
        indices: Vec<usize>,
    },
    ConcatCols(Vec<usize>),
    SpectralScale {
        w: usize,
        u: Vec<f32>,
        v: Vec<f32>,
        sigma: f32,
    },
    LogSoftmaxRows(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Interior mutability lets `Var` handles stay `Copy`.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `var`, or `None`
    /// if the scalar does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Differentiates the one-element tensor `root` with respect to every
    /// gradient-requiring leaf it depends on.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(root.graph, self), "backward on foreign var");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward needs a scalar root, got shape {:?}",
            nodes[root.id].value.shape()
        );
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            backprop_node(&nodes, node, &grad, &mut grads);
        }

        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let needs = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(grads, nodes, *a, g.zip_map(val(*b), |g, y| g * y));
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, g.zip_map(val(*a), |g, x| g * x));
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.scale(*c)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Abs(a) => {
            let gx = g.zip_map(val(*a), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, *a, gx);
        }
        Op::Square(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| 2.0 * x * g)),
        Op::Relu(a) => {
            let gx = g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 });
            accumulate(grads, nodes, *a, gx);
        }
        Op::LeakyRelu(a, slope) => {
            let s = *slope;
            let gx = g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { g * s });
            accumulate(grads, nodes, *a, gx);
        }
        Op::Tanh(a) => {
            let gx = g.zip_map(&node.value, |g, y| g * (1.0 - y * y));
            accumulate(grads, nodes, *a, gx);
        }
        Op::Softplus(a) => {
            let gx = g.zip_map(val(*a), |g, x| g * sigmoid(x));
            accumulate(grads, nodes, *a, gx);
        }
        Op::Sum(a) => {
            let s = g.item();
            accumulate(grads, nodes, *a, Tensor::full(val(*a).shape(), s));
        }
        Op::Mean(a) => {
            let x = val(*a);
            let s = g.item() / x.numel() as f32;
            accumulate(grads, nodes, *a, Tensor::full(x.shape(), s));
        }
        Op::Reshape(a) => {
            let gx = g.clone().reshape(val(*a).shape());
            accumulate(grads, nodes, *a, gx);
        }
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let (_, n) = val(*b).dims2();
            if needs(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut ga, false);
                accumulate(grads, nodes, *a, Tensor::new(&[m, k], ga));
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut gb, false);
                accumulate(grads, nodes, *b, Tensor::new(&[k, n], gb));
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, transpose2(g)),
        Op::Linear { x, w, b } => {
            let (batch, fan_in) = val(*x).dims2();
            let (fan_out, _) = val(*w).dims2();
            if needs(*x) {
                let mut gx = vec![0.0; batch * fan_in];
                gemm(batch, fan_out, fan_in, g.data(), false, val(*w).data(), false, &mut gx, false);
                accumulate(grads, nodes, *x, Tensor::new(&[batch, fan_in], gx));
            }
            if needs(*w) {
                let mut gw = vec![0.0; fan_out * fan_in];
                gemm(fan_out, batch, fan_in, g.data(), true, val(*x).data(), false, &mut gw, false);
                accumulate(grads, nodes, *w, Tensor::new(&[fan_out, fan_in], gw));
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut gb = vec![0.0; fan_out];
                    for row in g.data().chunks(fan_out) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, nodes, *b, Tensor::new(&[fan_out], gb));
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
        } => conv2d_backward(nodes, g, *x, *w, *b, *stride, *padding, grads),
        Op::Upsample2x(a) => {
            let (bsz, c, h, w) = val(*a).dims4();
            let mut gx = vec![0.0; bsz * c * h * w];
            let gd = g.data();
            for plane in 0..bsz * c {
                for i in 0..h {
                    for j in 0..w {
                        let base = plane * 4 * h * w;
                        let ow = 2 * w;
                        let r0 = base + (2 * i) * ow + 2 * j;
                        let r1 = r0 + ow;
                        gx[plane * h * w + i * w + j] = gd[r0] + gd[r0 + 1] + gd[r1] + gd[r1 + 1];
                    }
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(&[bsz, c, h, w], gx));
        }
        Op::InstanceNorm { x, inv_std } => {
            let (bsz, c, h, w) = val(*x).dims4();
            let n = h * w;
            let xhat = node.value.data();
            let gd = g.data();
            let mut gx = vec![0.0; bsz * c * n];
            for plane in 0..bsz * c {
                let r = plane * n..(plane + 1) * n;
                let (gy, xh) = (&gd[r.clone()], &xhat[r.clone()]);
                let sum_g: f64 = gy.iter().map(|&v| v as f64).sum();
                let sum_gx: f64 = gy.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
                let inv = inv_std[plane] as f64;
                let nf = n as f64;
                for (k, out) in gx[r].iter_mut().enumerate() {
                    let v = (nf * gy[k] as f64 - sum_g - xh[k] as f64 * sum_gx) * inv / nf;
                    *out = v as f32;
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(&[bsz, c, h, w], gx));
        }
        Op::ChannelAffine { x, gamma, beta } => {
            let (bsz, c, h, w) = val(*x).dims4();
            let n = h * w;
            let gd = g.data();
            if needs(*x) {
                let gm = val(*gamma).data();
                let mut gx = vec![0.0; bsz * c * n];
                for plane in 0..bsz * c {
                    for k in 0..n {
                        gx[plane * n + k] = gd[plane * n + k] * gm[plane];
                    }
                }
                accumulate(grads, nodes, *x, Tensor::new(&[bsz, c, h, w], gx));
            }
            if needs(*gamma) {
                let xd = val(*x).data();
                let gg: Vec<f32> = (0..bsz * c)
                    .map(|p| {
                        let r = p * n..(p + 1) * n;
                        gd[r.clone()]
                            .iter()
                            .zip(&xd[r])
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>() as f32
                    })
                    .collect();
                accumulate(grads, nodes, *gamma, Tensor::new(&[bsz, c], gg));
            }
            if needs(*beta) {
                let gb: Vec<f32> = (0..bsz * c)
                    .map(|p| gd[p * n..(p + 1) * n].iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect();
                accumulate(grads, nodes, *beta, Tensor::new(&[bsz, c], gb));
            }
        }
        Op::SpatialMean(a) => {
            let (bsz, c, h, w) = val(*a).dims4();
            let n = h * w;
            let inv = 1.0 / n as f32;
            let gx = Tensor::from_fn(&[bsz, c, h, w], |i| g.data()[i / n] * inv);
            accumulate(grads, nodes, *a, gx);
        }
        Op::L2NormalizeRows { x, norms } => {
            let (rows, d) = val(*x).dims2();
            let y = node.value.data();
            let gd = g.data();
            let mut gx = vec![0.0; rows * d];
            for r in 0..rows {
                let yr = &y[r * d..(r + 1) * d];
                let gr = &gd[r * d..(r + 1) * d];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                for k in 0..d {
                    gx[r * d + k] = ((gr[k] as f64 - yr[k] as f64 * dot) / norms[r] as f64) as f32;
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(&[rows, d], gx));
        }
        Op::Gram(a) => {
            let x = val(*a);
            let (bsz, c, h, w) = x.dims4();
            let n = h * w;
            let inv = 1.0 / n as f64;
            let gd = g.data();
            let xd = x.data();
            let mut gx = vec![0.0; bsz * c * n];
            for b in 0..bsz {
                let f = &xd[b * c * n..(b + 1) * c * n];
                let gg = &gd[b * c * c..(b + 1) * c * c];
                for i in 0..c {
                    for k in 0..n {
                        let mut acc = 0.0f64;
                        for j in 0..c {
                            acc += (gg[i * c + j] + gg[j * c + i]) as f64 * f[j * n + k] as f64;
                        }
                        gx[b * c * n + i * n + k] = (acc * inv) as f32;
                    }
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(&[bsz, c, h, w], gx));
        }
        Op::Gather { x, indices } => {
            let shape = val(*x).shape().to_vec();
            let mut gx = Tensor::zeros(&shape);
            let buf = gx.data_mut();
            for (k, &idx) in indices.iter().enumerate() {
                buf[idx] += g.data()[k];
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::ConcatCols(parts) => {
            let rows = g.shape()[0];
            let total = g.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let cols = val(p).shape()[1];
                if needs(p) {
                    let gp = Tensor::from_fn(&[rows, cols], |i| {
                        let (r, c) = (i / cols, i % cols);
                        g.data()[r * total + offset + c]
                    });
                    accumulate(grads, nodes, p, gp);
                }
                offset += cols;
            }
        }
        Op::SpectralScale { w, u, v, sigma } => {
            let wn = node.value.data();
            let dot: f64 = g
                .data()
                .iter()
                .zip(wn)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let cols = v.len();
            let gw = Tensor::from_fn(val(*w).shape(), |i| {
                let (r, c) = (i / cols, i % cols);
                ((g.data()[i] as f64 - dot * u[r] as f64 * v[c] as f64) / *sigma as f64) as f32
            });
            accumulate(grads, nodes, *w, gw);
        }
        Op::LogSoftmaxRows(a) => {
            let (rows, k) = val(*a).dims2();
            let y = node.value.data();
            let gd = g.data();
            let mut gx = vec![0.0; rows * k];
            for r in 0..rows {
                let s: f32 = gd[r * k..(r + 1) * k].iter().sum();
                for j in 0..k {
                    gx[r * k + j] = gd[r * k + j] - y[r * k + j].exp() * s;
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(&[rows, k], gx));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    g: &Tensor,
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    padding: usize,
    grads: &mut [Option<Tensor>],
) {
    let xt = &nodes[x].value;
    let wt = &nodes[w].value;
    let (bsz, cin, h, wd) = xt.dims4();
    let (cout, _, k, _) = wt.dims4();
    let geo = ConvGeometry {
        channels: cin,
        height: h,
        width: wd,
        kernel: k,
        stride,
        padding,
    };
    let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
    let need_x = nodes[x].requires_grad;
    let need_w = nodes[w].requires_grad;
    let mut cols = vec![0.0; rows * cols_n];
    let mut gcols = vec![0.0; rows * cols_n];
    let mut gw = vec![0.0; cout * rows];
    let mut gx = if need_x { vec![0.0; xt.numel()] } else { Vec::new() };
    let sample_in = cin * h * wd;
    let sample_out = cout * cols_n;
    for s in 0..bsz {
        let gy = &g.data()[s * sample_out..(s + 1) * sample_out];
        if need_w {
            im2col(&xt.data()[s * sample_in..(s + 1) * sample_in], &geo, &mut cols);
            gemm(cout, cols_n, rows, gy, false, &cols, true, &mut gw, true);
        }
        if need_x {
            gemm(rows, cout, cols_n, wt.data(), true, gy, false, &mut gcols, false);
            col2im(&gcols, &geo, &mut gx[s * sample_in..(s + 1) * sample_in]);
        }
    }
    if need_x {
        accumulate(grads, nodes, x, Tensor::new(xt.shape(), gx));
    }
    if need_w {
        accumulate(grads, nodes, w, Tensor::new(wt.shape(), gw));
    }
    if let Some(b) = b {
        if nodes[b].requires_grad {
            let mut gb = vec![0.0f64; cout];
            for s in 0..bsz {
                for (o, acc) in gb.iter_mut().enumerate() {
                    let start = s * sample_out + o * cols_n;
                    *acc += g.data()[start..start + cols_n].iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            let gb = gb.into_iter().map(|v| v as f32).collect();
            accumulate(grads, nodes, b, Tensor::new(&[cout], gb));
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2();
    Tensor::from_fn(&[c, r], |i| {
        let (j, k) = (i / r, i % r);
        t.data()[k * c + j]
    })
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f32 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    pub fn add(&self, other: &Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, factor: f32) -> Var<'g> {
        let v = self.value().scale(factor);
        self.unary(v, Op::Scale(self.id, factor))
    }

    pub fn add_scalar(&self, c: f32) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn abs(&self) -> Var<'g> {
        let v = self.value().map(f32::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn square(&self) -> Var<'g> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f32) -> Var<'g> {
        let v = self.value().map(|x| if x > 0.0 { x } else { x * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn tanh(&self) -> Var<'g> {
        let v = self.value().map(f32::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Var<'g> {
        let v = self
            .value()
            .map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let v = (*self.value()).clone().reshape(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, other: &Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        self.binary(other, Tensor::new(&[m, n], out), Op::MatMul(self.id, other.id))
    }

    pub fn transpose(&self) -> Var<'g> {
        let v = transpose2(&self.value());
        self.unary(v, Op::Transpose(self.id))
    }

    /// `x · wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, weight: &Var<'g>, bias: Option<&Var<'g>>) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (batch, fan_in) = x.dims2();
        let (fan_out, w_in) = w.dims2();
        assert_eq!(fan_in, w_in, "linear: input has {fan_in} features, weight expects {w_in}");
        let mut out = vec![0.0; batch * fan_out];
        gemm(batch, fan_in, fan_out, x.data(), false, w.data(), true, &mut out, false);
        let mut rg = self.requires_grad() || weight.requires_grad();
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), [fan_out], "linear: bias shape");
            for row in out.chunks_mut(fan_out) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            rg |= b.requires_grad();
        }
        self.graph.push(
            Tensor::new(&[batch, fan_out], out),
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
            },
            rg,
        )
    }

    /// Zero-padded 2-D convolution, `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`.
    pub fn conv2d(
        &self,
        weight: &Var<'g>,
        bias: Option<&Var<'g>>,
        stride: usize,
        padding: usize,
    ) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (bsz, cin, h, wd) = x.dims4();
        let (cout, w_cin, k, k2) = w.dims4();
        assert_eq!(cin, w_cin, "conv2d: input has {cin} channels, kernel expects {w_cin}");
        assert_eq!(k, k2, "conv2d: only square kernels");
        assert!(h + 2 * padding >= k && wd + 2 * padding >= k, "conv2d: kernel larger than input");
        let geo = ConvGeometry {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            padding,
        };
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
        let mut cols = vec![0.0; rows * cols_n];
        let mut out = vec![0.0; bsz * cout * cols_n];
        let sample_in = cin * h * wd;
        for s in 0..bsz {
            im2col(&x.data()[s * sample_in..(s + 1) * sample_in], &geo, &mut cols);
            let dst = &mut out[s * cout * cols_n..(s + 1) * cout * cols_n];
            gemm(cout, rows, cols_n, w.data(), false, &cols, false, dst, false);
        }
        let mut rg = self.requires_grad() || weight.requires_grad();
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), [cout], "conv2d: bias shape");
            for plane in out.chunks_mut(cols_n).enumerate() {
                let bb = bv.data()[plane.0 % cout];
                for v in plane.1 {
                    *v += bb;
                }
            }
            rg |= b.requires_grad();
        }
        self.graph.push(
            Tensor::new(&[bsz, cout, oh, ow], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                stride,
                padding,
            },
            rg,
        )
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&self) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let v = Tensor::from_fn(&[b, c, oh, ow], |i| {
            let plane = i / (oh * ow);
            let r = (i % (oh * ow)) / ow;
            let col = i % ow;
            x.data()[plane * h * w + (r / 2) * w + col / 2]
        });
        self.unary(v, Op::Upsample2x(self.id))
    }

    /// Per-sample, per-channel normalization over spatial positions:
    /// `(x − μ) / √(σ² + eps)` with the biased variance.
    pub fn instance_norm(&self, eps: f32) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let n = h * w;
        let mut out = vec![0.0; b * c * n];
        let mut inv_std = Vec::with_capacity(b * c);
        for plane in 0..b * c {
            let src = &x.data()[plane * n..(plane + 1) * n];
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for (o, &v) in out[plane * n..(plane + 1) * n].iter_mut().zip(src) {
                *o = ((v as f64 - mean) * inv) as f32;
            }
            inv_std.push(inv as f32);
        }
        self.unary(
            Tensor::new(&[b, c, h, w], out),
            Op::InstanceNorm { x: self.id, inv_std },
        )
    }

    /// `x · γ + β` with per-sample, per-channel `γ, β: [B, C]`.
    pub fn channel_affine(&self, gamma: &Var<'g>, beta: &Var<'g>) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let gm = gamma.value();
        let bt = beta.value();
        assert_eq!(gm.shape(), [b, c], "channel_affine: gamma shape");
        assert_eq!(bt.shape(), [b, c], "channel_affine: beta shape");
        let n = h * w;
        let v = Tensor::from_fn(&[b, c, h, w], |i| {
            let p = i / n;
            x.data()[i] * gm.data()[p] + bt.data()[p]
        });
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.graph.push(
            v,
            Op::ChannelAffine {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
            },
            rg,
        )
    }

    /// `[B, C, H, W] → [B, C]` spatial average.
    pub fn spatial_mean(&self) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let n = h * w;
        let v = Tensor::from_fn(&[b, c], |p| {
            (x.data()[p * n..(p + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32
        });
        self.unary(v, Op::SpatialMean(self.id))
    }

    /// Scales every row of a `[B, d]` matrix to unit Euclidean norm; norms
    /// below `eps` are clamped to `eps`.
    pub fn l2_normalize_rows(&self, eps: f32) -> Var<'g> {
        let x = self.value();
        let (rows, d) = x.dims2();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let src = &x.data()[r * d..(r + 1) * d];
            let norm = src.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            let norm = norm.max(eps as f64);
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(src) {
                *o = (v as f64 / norm) as f32;
            }
            norms.push(norm as f32);
        }
        self.unary(
            Tensor::new(&[rows, d], out),
            Op::L2NormalizeRows { x: self.id, norms },
        )
    }

    /// Per-sample Gram matrix `[B, C, H, W] → [B, C, C]`, normalized by `H·W`.
    pub fn gram(&self) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let n = h * w;
        let mut out = vec![0.0; b * c * c];
        for s in 0..b {
            let f = &x.data()[s * c * n..(s + 1) * c * n];
            for i in 0..c {
                for j in i..c {
                    let fi = &f[i * n..(i + 1) * n];
                    let fj = &f[j * n..(j + 1) * n];
                    let dot: f64 = fi.iter().zip(fj).map(|(&a, &b)| a as f64 * b as f64).sum();
                    let v = (dot / n as f64) as f32;
                    out[s * c * c + i * c + j] = v;
                    out[s * c * c + j * c + i] = v;
                }
            }
        }
        self.unary(Tensor::new(&[b, c, c], out), Op::Gram(self.id))
    }

    /// Picks elements by flat index into a new tensor of shape `shape`.
    pub fn gather(&self, indices: Vec<usize>, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(indices.len(), shape.iter().product::<usize>(), "gather: shape/index count");
        let v = Tensor::new(shape, indices.iter().map(|&i| x.data()[i]).collect());
        self.unary(v, Op::Gather { x: self.id, indices })
    }

    /// Concatenates rank-2 vars along their second axis.
    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let rows = values[0].dims2().0;
        let total: usize = values.iter().map(|v| v.dims2().1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                let (vr, c) = v.dims2();
                assert_eq!(vr, rows, "concat_cols: row mismatch");
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(Var::requires_grad);
        graph.push(
            Tensor::new(&[rows, total], out),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    /// `W / σ` with `σ = uᵀ W v` for fixed singular-vector estimates `u`
    /// (length = leading dim) and `v` (length = product of the rest).
    /// `σ` is clamped below by `eps`.
    pub fn spectral_scale(&self, u: &[f32], v: &[f32], eps: f32) -> Var<'g> {
        let w = self.value();
        let rows = w.shape()[0];
        let cols = w.numel() / rows;
        assert_eq!(u.len(), rows, "spectral_scale: u length");
        assert_eq!(v.len(), cols, "spectral_scale: v length");
        let mut sigma = 0.0f64;
        for r in 0..rows {
            let row = &w.data()[r * cols..(r + 1) * cols];
            let wv: f64 = row.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
            sigma += u[r] as f64 * wv;
        }
        let sigma = (sigma as f32).max(eps);
        let out = w.scale(1.0 / sigma);
        self.unary(
            out,
            Op::SpectralScale {
                w: self.id,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
        )
    }

    /// Row-wise log-softmax of a `[B, K]` matrix.
    pub fn log_softmax_rows(&self) -> Var<'g> {
        let x = self.value();
        let (rows, k) = x.dims2();
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            let row = &x.data()[r * k..(r + 1) * k];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln();
            for (o, &v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.unary(Tensor::new(&[rows, k], out), Op::LogSoftmaxRows(self.id))
    }
}

impl<'g> std::ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        Var::add(&self, &rhs)
    }
}

impl<'g> std::ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        Var::sub(&self, &rhs)
    }
}

impl<'g> std::ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        Var::mul(&self, &rhs)
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}
