//! Reverse-mode differentiation over a recorded list of primitive operations.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations are
//! methods on [`Var`], a copyable handle into the tape, and every node is pushed
//! after its parents, so the node list is already in topological order.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

/// Stable logistic function.
#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    #[inline]
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Relu => x.max(F::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    fn derivative<F: Scalar>(self, x: F, y: F) -> F {
        match self {
            Activation::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => F::one() - y * y,
            Activation::Sigmoid => y * (F::one() - y),
            Activation::Softplus => sigmoid(x),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn out_cells(&self) -> usize {
        self.oh * self.ow
    }
    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }
}

enum Op<F> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    AddRowBias {
        x: usize,
        b: usize,
    },
    AddChannelBias {
        x: usize,
        b: usize,
        channels: usize,
        spatial: usize,
    },
    Act(usize, Activation),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    ConcatCols {
        parts: Vec<(usize, usize)>,
        rows: usize,
    },
    ConcatRows(Vec<usize>),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
        width: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    ChannelsLast {
        x: usize,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    Softmax(usize),
    MeanRows {
        x: usize,
        rows: usize,
        cols: usize,
    },
    MaxRows {
        x: usize,
        argmax: Vec<usize>,
    },
}

impl<F> Op<F> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRowBias { x, b } | Op::AddChannelBias { x, b, .. } => vec![*x, *b],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::Scale(x, _)
            | Op::Act(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::GatherRows { x, .. }
            | Op::MaxPool2 { x, .. }
            | Op::ChannelsLast { x, .. }
            | Op::MeanRows { x, .. }
            | Op::MaxRows { x, .. } => vec![*x],
            Op::ConcatCols { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a forward computation for later reverse accumulation.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    check_finite: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Scalar> Tape<F> {
    /// Non-finite detection is on in debug builds and off otherwise.
    pub fn new() -> Self {
        Self::with_finite_checks(cfg!(debug_assertions))
    }

    pub fn with_finite_checks(check_finite: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor<F>, op: Op<F>) -> Result<Var<'_, F>> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Tensor<F> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse accumulation from a scalar node. Gradients of nodes reached along
    /// several paths are summed.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![F::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accum<'g, F: Scalar>(
    grads: &'g mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    id: usize,
) -> Option<&'g mut Vec<F>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![F::zero(); len]))
}

fn backprop_node<F: Scalar>(nodes: &[Node<F>], id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            ta,
            tb,
            m,
            k,
            n,
        } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            if let Some(ga) = accum(grads, nodes, a) {
                if ta {
                    gemm(ga, bv, g, k, n, m, tb, true, F::one());
                } else {
                    gemm(ga, g, bv, m, n, k, false, !tb, F::one());
                }
            }
            if let Some(gb) = accum(grads, nodes, b) {
                if tb {
                    gemm(gb, g, av, n, m, k, true, ta, F::one());
                } else {
                    gemm(gb, av, g, k, m, n, !ta, false, F::one());
                }
            }
        }
        &Op::Add(a, b) => {
            for p in [a, b] {
                if let Some(gp) = accum(grads, nodes, p) {
                    gp.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = accum(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = accum(grads, nodes, b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            if let Some(ga) = accum(grads, nodes, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = accum(grads, nodes, b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        &Op::Scale(x, c) => {
            if let Some(gx) = accum(grads, nodes, x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += c * s);
            }
        }
        &Op::AddRowBias { x, b } => {
            if let Some(gx) = accum(grads, nodes, x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = accum(grads, nodes, b) {
                let w = gb.len();
                for row in g.chunks_exact(w) {
                    gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            }
        }
        &Op::AddChannelBias {
            x,
            b,
            channels,
            spatial,
        } => {
            if let Some(gx) = accum(grads, nodes, x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = accum(grads, nodes, b) {
                for (i, plane) in g.chunks_exact(spatial).enumerate() {
                    gb[i % channels] += plane.iter().copied().sum::<F>();
                }
            }
        }
        &Op::Act(x, kind) => {
            let xv = nodes[x].value.data();
            let yv = node.value.data();
            if let Some(gx) = accum(grads, nodes, x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * kind.derivative(xv[i], yv[i]);
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(gx) = accum(grads, nodes, x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(x) => {
            if let Some(gx) = accum(grads, nodes, x) {
                let s = g[0] / F::lit(gx.len() as f64);
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::Reshape(x) => {
            if let Some(gx) = accum(grads, nodes, x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        Op::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, width) in parts {
                if let Some(gp) = accum(grads, nodes, p) {
                    for r in 0..*rows {
                        let src = &g[r * total + offset..r * total + offset + width];
                        gp[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
                offset += width;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = accum(grads, nodes, p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, &s)| *d += s);
                }
                offset += len;
            }
        }
        Op::GatherRows { x, idx, width } => {
            if let Some(gx) = accum(grads, nodes, *x) {
                for (out_row, &src) in idx.iter().enumerate() {
                    let dst = &mut gx[src * width..(src + 1) * width];
                    dst.iter_mut()
                        .zip(&g[out_row * width..(out_row + 1) * width])
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::Conv2d { x, k, geom, cols } => {
            let geom = *geom;
            let (patch, cells) = (geom.patch(), geom.out_cells());
            let out_len = geom.c_out * cells;
            if let Some(gk) = accum(grads, nodes, *k) {
                for n in 0..geom.batch {
                    let go = &g[n * out_len..(n + 1) * out_len];
                    let cn = &cols[n * patch * cells..(n + 1) * patch * cells];
                    gemm(gk, go, cn, geom.c_out, cells, patch, false, true, F::one());
                }
            }
            let kv = nodes[*k].value.data();
            if let Some(gx) = accum(grads, nodes, *x) {
                let mut dcols = vec![F::zero(); patch * cells];
                for n in 0..geom.batch {
                    let go = &g[n * out_len..(n + 1) * out_len];
                    gemm(&mut dcols, kv, go, patch, geom.c_out, cells, true, false, F::zero());
                    let dx = &mut gx[n * geom.in_len()..(n + 1) * geom.in_len()];
                    col2im_add(&dcols, dx, &geom);
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(gx) = accum(grads, nodes, *x) {
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
        }
        &Op::ChannelsLast {
            x,
            batch,
            channels,
            spatial,
        } => {
            if let Some(gx) = accum(grads, nodes, x) {
                for n in 0..batch {
                    for c in 0..channels {
                        for p in 0..spatial {
                            gx[(n * channels + c) * spatial + p] += g[(n * spatial + p) * channels + c];
                        }
                    }
                }
            }
        }
        &Op::Softmax(x) => {
            let y = node.value.data();
            let dot: F = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
            if let Some(gx) = accum(grads, nodes, x) {
                for i in 0..y.len() {
                    gx[i] += y[i] * (g[i] - dot);
                }
            }
        }
        &Op::MeanRows { x, rows, cols } => {
            if let Some(gx) = accum(grads, nodes, x) {
                let inv = F::one() / F::lit(rows as f64);
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c] * inv;
                    }
                }
            }
        }
        Op::MaxRows { x, argmax } => {
            if let Some(gx) = accum(grads, nodes, *x) {
                for (c, &src) in argmax.iter().enumerate() {
                    gx[src] += g[c];
                }
            }
        }
    }
}

fn im2col<F: Scalar>(x: &[F], cols: &mut [F], g: &ConvGeom) {
    let cells = g.out_cells();
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * cells..(row + 1) * cells];
                for oy in 0..g.oh {
                    let src = &x[(ci * g.h + oy * g.stride + ki) * g.w..];
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] = src[ox * g.stride + kj];
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Scalar>(cols: &[F], dx: &mut [F], g: &ConvGeom) {
    let cells = g.out_cells();
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * cells..(row + 1) * cells];
                for oy in 0..g.oh {
                    let base = (ci * g.h + oy * g.stride + ki) * g.w;
                    for ox in 0..g.ow {
                        dx[base + ox * g.stride + kj] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn as_matrix<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(dim_err(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> F {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    /// Copy of this value that stops gradient flow.
    pub fn detach(&self) -> Var<'t, F> {
        self.tape.constant(self.value())
    }

    fn binary(
        self,
        other: Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.push(name, Tensor::new(a.shape(), data)?, op)
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: F) -> Result<Var<'t, F>> {
        let v = self.value().map(|x| x * c);
        self.tape.push("scale", v, Op::Scale(self.id, c))
    }

    pub fn square(self) -> Result<Var<'t, F>> {
        self.mul(self)
    }

    pub fn activation(self, mode: Activation) -> Result<Var<'t, F>> {
        let v = self.value().map(|x| mode.apply(x));
        self.tape.push("activation", v, Op::Act(self.id, mode))
    }

    pub fn relu(self) -> Result<Var<'t, F>> {
        self.activation(Activation::Relu)
    }

    pub fn tanh(self) -> Result<Var<'t, F>> {
        self.activation(Activation::Tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t, F>> {
        self.activation(Activation::Sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'t, F>> {
        self.activation(Activation::Softplus)
    }

    pub fn sum(self) -> Result<Var<'t, F>> {
        let s = self.value().data().iter().copied().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t, F>> {
        let v = self.value();
        let s = v.data().iter().copied().sum::<F>() / F::lit(v.len() as f64);
        self.tape.push("mean", Tensor::scalar(s), Op::Mean(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let v = self.value().reshape(shape)?;
        self.tape.push("reshape", v, Op::Reshape(self.id))
    }

    fn mm(self, other: Var<'t, F>, ta: bool, tb: bool) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        let (ra, ca) = as_matrix("matmul", &a)?;
        let (rb, cb) = as_matrix("matmul", &b)?;
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(dim_err(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?}{} x {:?}{}",
                    a.shape(),
                    if ta { "^T" } else { "" },
                    b.shape(),
                    if tb { "^T" } else { "" }
                ),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(&mut out, a.data(), b.data(), m, k, n, ta, tb, F::zero());
        self.tape.push(
            "matmul",
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
                m,
                k,
                n,
            },
        )
    }

    /// `self * other`.
    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.mm(other, false, false)
    }

    /// `self * other^T`.
    pub fn matmul_nt(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.mm(other, false, true)
    }

    /// `self^T * other`.
    pub fn matmul_tn(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.mm(other, true, false)
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_row_bias(self, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        let (x, b) = (self.value(), bias.value());
        let (_, c) = as_matrix("add_row_bias", &x)?;
        if b.len() != c {
            return Err(dim_err(
                "add_row_bias",
                format!("bias {:?} does not match rows of {:?}", b.shape(), x.shape()),
            ));
        }
        let data = x
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&v, &w)| v + w))
            .collect();
        self.tape.push(
            "add_row_bias",
            Tensor::new(x.shape(), data)?,
            Op::AddRowBias {
                x: self.id,
                b: bias.id,
            },
        )
    }

    /// Adds a per-channel bias to a `C x H x W` or `N x C x H x W` activation.
    pub fn add_channel_bias(self, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        let (x, b) = (self.value(), bias.value());
        let s = x.shape();
        let (channels, spatial) = match s.len() {
            3 => (s[0], s[1] * s[2]),
            4 => (s[1], s[2] * s[3]),
            _ => return Err(dim_err("add_channel_bias", format!("unsupported shape {s:?}"))),
        };
        if b.len() != channels {
            return Err(dim_err(
                "add_channel_bias",
                format!("bias {:?} does not match channels of {s:?}", b.shape()),
            ));
        }
        let bd = b.data();
        let data = x
            .data()
            .chunks_exact(spatial)
            .enumerate()
            .flat_map(|(i, plane)| {
                let bias = bd[i % channels];
                plane.iter().map(move |&v| v + bias)
            })
            .collect();
        self.tape.push(
            "add_channel_bias",
            Tensor::new(s, data)?,
            Op::AddChannelBias {
                x: self.id,
                b: bias.id,
                channels,
                spatial,
            },
        )
    }

    /// Valid cross-correlation of `C_in x H x W` (or batched `N x C_in x H x W`)
    /// input with a `C_out x C_in x kh x kw` kernel.
    pub fn conv2d(self, kernel: Var<'t, F>, stride: usize) -> Result<Var<'t, F>> {
        let (x, k) = (self.value(), kernel.value());
        let (batch, c_in, h, w, batched) = match *x.shape() {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            ref s => return Err(dim_err("conv2d", format!("unsupported input shape {s:?}"))),
        };
        let &[c_out, kc, kh, kw] = k.shape() else {
            return Err(dim_err(
                "conv2d",
                format!("kernel must be 4-d, got {:?}", k.shape()),
            ));
        };
        if kc != c_in || kh > h || kw > w || stride == 0 {
            return Err(dim_err(
                "conv2d",
                format!("input {:?} incompatible with kernel {:?} at stride {stride}", x.shape(), k.shape()),
            ));
        }
        if (h - kh) % stride != 0 || (w - kw) % stride != 0 {
            return Err(dim_err(
                "conv2d",
                format!("stride {stride} does not tile input {:?} with kernel {kh}x{kw}", x.shape()),
            ));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        };
        let (patch, cells) = (geom.patch(), geom.out_cells());
        let mut cols = vec![F::zero(); batch * patch * cells];
        let mut out = vec![F::zero(); batch * c_out * cells];
        for n in 0..batch {
            let cn = &mut cols[n * patch * cells..(n + 1) * patch * cells];
            im2col(&x.data()[n * geom.in_len()..(n + 1) * geom.in_len()], cn, &geom);
            let on = &mut out[n * c_out * cells..(n + 1) * c_out * cells];
            gemm(on, k.data(), cn, c_out, patch, cells, false, false, F::zero());
        }
        let shape: Vec<usize> = if batched {
            vec![batch, c_out, geom.oh, geom.ow]
        } else {
            vec![c_out, geom.oh, geom.ow]
        };
        self.tape.push(
            "conv2d",
            Tensor::new(&shape, out)?,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                geom,
                cols,
            },
        )
    }

    /// 2x2 max pooling with stride 2 over the last two axes; odd trailing
    /// rows/columns are dropped.
    pub fn max_pool2(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 1] < 2 || s[s.len() - 2] < 2 {
            return Err(dim_err("max_pool2", format!("input {s:?} too small")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = x.len() / (h * w);
        let xd = x.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = s.to_vec();
        let l = shape.len();
        shape[l - 2] = oh;
        shape[l - 1] = ow;
        self.tape.push(
            "max_pool2",
            Tensor::new(&shape, out)?,
            Op::MaxPool2 { x: self.id, argmax },
        )
    }

    /// `N x C x H x W` to `(N*H*W) x C`: one row per spatial cell.
    pub fn channels_last(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let &[batch, channels, h, w] = x.shape() else {
            return Err(dim_err("channels_last", format!("expected 4-d input, got {:?}", x.shape())));
        };
        let spatial = h * w;
        let xd = x.data();
        let mut out = vec![F::zero(); x.len()];
        for n in 0..batch {
            for c in 0..channels {
                for p in 0..spatial {
                    out[(n * spatial + p) * channels + c] = xd[(n * channels + c) * spatial + p];
                }
            }
        }
        self.tape.push(
            "channels_last",
            Tensor::new(&[batch * spatial, channels], out)?,
            Op::ChannelsLast {
                x: self.id,
                batch,
                channels,
                spatial,
            },
        )
    }

    /// Softmax over all entries, keeping the shape.
    pub fn softmax(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let max = x.data().iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = x.data().iter().map(|&v| (v - max).exp()).collect();
        let z: F = exps.iter().copied().sum();
        let data = exps.into_iter().map(|e| e / z).collect();
        self.tape
            .push("softmax", Tensor::new(x.shape(), data)?, Op::Softmax(self.id))
    }

    /// Selects leading-axis slices by index (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, F>> {
        let x = self.value();
        let rows = x.rows();
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(dim_err(
                "gather_rows",
                format!("indices {idx:?} out of range for {:?}", x.shape()),
            ));
        }
        let width = x.row_len();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        self.tape.push(
            "gather_rows",
            Tensor::new(&shape, data)?,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
                width,
            },
        )
    }

    pub fn row(self, i: usize) -> Result<Var<'t, F>> {
        self.gather_rows(&[i])
    }

    /// Column-wise mean of an `r x c` matrix, as `1 x c`.
    ///
    /// Each column is summed in sorted order, so the result does not depend
    /// on the row order at all, not even in the last bit.
    pub fn mean_rows(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let (rows, cols) = as_matrix("mean_rows", &x)?;
        let xd = x.data();
        let inv = F::one() / F::lit(rows as f64);
        let mut column = Vec::with_capacity(rows);
        let out = (0..cols)
            .map(|c| {
                column.clear();
                column.extend((0..rows).map(|r| xd[r * cols + c]));
                column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                column.iter().copied().sum::<F>() * inv
            })
            .collect();
        self.tape.push(
            "mean_rows",
            Tensor::new(&[1, cols], out)?,
            Op::MeanRows {
                x: self.id,
                rows,
                cols,
            },
        )
    }

    /// Column-wise max of an `r x c` matrix, as `1 x c`.
    pub fn max_rows(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let (rows, cols) = as_matrix("max_rows", &x)?;
        let xd = x.data();
        let mut out = xd[..cols].to_vec();
        let mut argmax: Vec<usize> = (0..cols).collect();
        for r in 1..rows {
            for c in 0..cols {
                if xd[r * cols + c] > out[c] {
                    out[c] = xd[r * cols + c];
                    argmax[c] = r * cols + c;
                }
            }
        }
        self.tape.push(
            "max_rows",
            Tensor::new(&[1, cols], out)?,
            Op::MaxRows { x: self.id, argmax },
        )
    }
}

/// Column-wise concatenation of matrices with equal row counts.
pub fn concat_cols<'t, F: Scalar>(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of zero parts".into()))?;
    let values: Vec<Tensor<F>> = parts.iter().map(Var::value).collect();
    let rows = as_matrix("concat_cols", &values[0])?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for v in &values {
        let (r, c) = as_matrix("concat_cols", v)?;
        if r != rows {
            return Err(dim_err(
                "concat_cols",
                format!("row counts differ: {:?} vs {:?}", values[0].shape(), v.shape()),
            ));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (v, &w) in values.iter().zip(&widths) {
            data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let op = Op::ConcatCols {
        parts: parts.iter().map(|p| p.id).zip(widths).collect(),
        rows,
    };
    first.tape.push("concat_cols", Tensor::new(&[rows, total], data)?, op)
}

/// Leading-axis concatenation of tensors whose trailing shapes agree.
pub fn concat_rows<'t, F: Scalar>(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_rows of zero parts".into()))?;
    let values: Vec<Tensor<F>> = parts.iter().map(Var::value).collect();
    let tail = values[0].shape()[1..].to_vec();
    let mut rows = 0;
    let mut data = Vec::new();
    for v in &values {
        if v.shape()[1..] != tail[..] {
            return Err(dim_err(
                "concat_rows",
                format!("trailing shapes differ: {:?} vs {:?}", values[0].shape(), v.shape()),
            ));
        }
        rows += v.shape()[0];
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![rows];
    shape.extend(tail);
    let op = Op::ConcatRows(parts.iter().map(|p| p.id).collect());
    first.tape.push("concat_rows", Tensor::new(&shape, data)?, op)
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to a leaf. Leaves that require grad
    /// but were not reached get zeros.
    pub fn get(&self, var: Var<'_, F>) -> Option<Tensor<F>> {
        let shape = &self.shapes[var.id];
        if !var.tape.nodes.borrow()[var.id].needs_grad {
            return None;
        }
        let data = match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => vec![F::zero(); shape.iter().product()],
        };
        Some(Tensor::new(shape, data).expect("gradient shape"))
    }

    /// Like [`Gradients::get`] but moves the buffer out.
    pub fn take(&mut self, var: Var<'_, F>) -> Option<Vec<F>> {
        if !var.tape.nodes.borrow()[var.id].needs_grad {
            return None;
        }
        let len = self.shapes[var.id].iter().product();
        Some(self.grads[var.id].take().unwrap_or_else(|| vec![F::zero(); len]))
    }
}
