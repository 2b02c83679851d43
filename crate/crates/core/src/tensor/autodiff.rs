//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable primitive records one node on the [`Tape`] when at
//! least one of its inputs is tracked. Node order is insertion order, which is
//! a valid topological order, so backward is a single reverse sweep.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{gemm, permute_data};
use super::{inverse_permutation, validate_permutation, Element, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Backward rule for [`Tape::custom`]: maps the output gradient to one
/// gradient per input, in input order.
pub type BackwardFn<F> = Box<dyn Fn(&Tensor<F>) -> Vec<Tensor<F>>>;

/// A value flowing through a computation, optionally linked to a tape node.
#[derive(Clone, Debug)]
pub struct Var<F> {
    value: Arc<Tensor<F>>,
    node: Option<NodeId>,
}

impl<F: Element> Var<F> {
    /// An untracked value usable with any tape.
    pub fn constant(value: Tensor<F>) -> Self {
        Self {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_value(self) -> Tensor<F> {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }
}

enum Op<F> {
    Leaf,
    Add(Option<NodeId>, Option<NodeId>),
    Sub(Option<NodeId>, Option<NodeId>),
    Mul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        av: Arc<Tensor<F>>,
        bv: Arc<Tensor<F>>,
    },
    Scale(Option<NodeId>, F),
    AddTrailing {
        x: Option<NodeId>,
        b: Option<NodeId>,
        b_len: usize,
    },
    MatMul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        av: Arc<Tensor<F>>,
        bv: Arc<Tensor<F>>,
        trans_b: bool,
        alpha: F,
        dims: (usize, usize, usize, usize),
    },
    Linear {
        x: Option<NodeId>,
        w: Option<NodeId>,
        b: Option<NodeId>,
        xv: Arc<Tensor<F>>,
        wv: Arc<Tensor<F>>,
    },
    Softmax {
        x: Option<NodeId>,
        out: Arc<Tensor<F>>,
    },
    LayerNorm {
        x: Option<NodeId>,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        xhat: Vec<F>,
        rstd: Vec<F>,
        gv: Arc<Tensor<F>>,
    },
    Silu(Option<NodeId>, Arc<Tensor<F>>),
    Gelu(Option<NodeId>, Arc<Tensor<F>>),
    Permute(Option<NodeId>, Vec<usize>),
    Reshape(Option<NodeId>),
    MulConst(Option<NodeId>, Arc<Tensor<F>>),
    Sum(Option<NodeId>),
    Mean(Option<NodeId>),
    Custom(Vec<Option<NodeId>>, BackwardFn<F>),
}

struct Node<F> {
    op: Op<F>,
    shape: Vec<usize>,
}

/// Append-only record of differentiable operations.
///
/// A tape is single-owner and used for one forward/backward pass; create a
/// fresh one per training step. An inference tape records nothing and never
/// allocates gradient state.
pub struct Tape<F> {
    tracking: bool,
    nodes: RefCell<Vec<Node<F>>>,
    consumed: Cell<bool>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the tracked leaves of a tape.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: HashMap<NodeId, Tensor<F>>,
    leaf_shapes: HashMap<NodeId, Vec<usize>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, var: &Var<F>) -> Option<&Tensor<F>> {
        var.node.and_then(|id| self.grads.get(&id))
    }

    /// Gradient for `var`; leaves the loss never touched get zeros.
    pub fn wrt(&self, var: &Var<F>) -> Tensor<F> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }

    pub fn take(&mut self, var: &Var<F>) -> Tensor<F> {
        let id = var.node;
        match id.and_then(|id| self.grads.remove(&id)) {
            Some(g) => g,
            None => Tensor::zeros(var.shape()),
        }
    }

    /// Number of tracked leaves on the tape, touched or not.
    pub fn leaf_count(&self) -> usize {
        self.leaf_shapes.len()
    }
}

fn any_tracked(ids: &[Option<NodeId>]) -> bool {
    ids.iter().any(Option::is_some)
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / last.max(1);
    (rows, last)
}

impl<F: Element> Tape<F> {
    /// A tape that records operations for backward.
    pub fn new() -> Self {
        Self {
            tracking: true,
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// A tape that records nothing: all results are untracked constants.
    pub fn inference() -> Self {
        Self {
            tracking: false,
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<F>, value: Tensor<F>, inputs: &[Option<NodeId>]) -> Var<F> {
        self.push_arc(op, Arc::new(value), inputs)
    }

    fn push_arc(&self, op: Op<F>, value: Arc<Tensor<F>>, inputs: &[Option<NodeId>]) -> Var<F> {
        let node = if self.tracking && any_tracked(inputs) {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op,
                shape: value.shape().to_vec(),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var { value, node }
    }

    /// A tracked leaf (parameter or input to differentiate against).
    pub fn leaf(&self, value: Tensor<F>) -> Var<F> {
        self.param(Arc::new(value))
    }

    /// A tracked leaf sharing storage with the caller.
    pub fn param(&self, value: Arc<Tensor<F>>) -> Var<F> {
        if !self.tracking {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            shape: value.shape().to_vec(),
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<F> {
        Var::constant(value)
    }

    pub fn add(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let out = a.value.zip_map(&b.value, |x, y| x + y)?;
        Ok(self.push(Op::Add(a.node, b.node), out, &[a.node, b.node]))
    }

    pub fn sub(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let out = a.value.zip_map(&b.value, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.node, b.node), out, &[a.node, b.node]))
    }

    pub fn mul(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let out = a.value.zip_map(&b.value, |x, y| x * y)?;
        let op = Op::Mul {
            a: a.node,
            b: b.node,
            av: a.value.clone(),
            bv: b.value.clone(),
        };
        Ok(self.push(op, out, &[a.node, b.node]))
    }

    pub fn scale(&self, x: &Var<F>, factor: F) -> Var<F> {
        let out = x.value.map(|v| v * factor);
        self.push(Op::Scale(x.node, factor), out, &[x.node])
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x` (bias rows,
    /// position tables).
    pub fn add_trailing(&self, x: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let xs = x.shape();
        let bs = b.shape();
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::ShapeMismatch {
                op: "add_trailing",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let b_len = b.value.numel();
        let bd = b.value.data();
        let mut data = x.value.data().to_vec();
        for chunk in data.chunks_exact_mut(b_len) {
            for (v, &bv) in chunk.iter_mut().zip(bd) {
                *v = *v + bv;
            }
        }
        let out = Tensor::from_parts(xs.to_vec(), data);
        let op = Op::AddTrailing {
            x: x.node,
            b: b.node,
            b_len,
        };
        Ok(self.push(op, out, &[x.node, b.node]))
    }

    /// Batched `a @ b` over equal leading axes: `[..., M, K] x [..., K, P]`.
    pub fn matmul(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        self.matmul_ext(a, b, false, F::one())
    }

    /// Batched `alpha * a @ b^T`: `[..., M, K] x [..., P, K]`.
    pub fn matmul_nt(&self, a: &Var<F>, b: &Var<F>, alpha: F) -> Result<Var<F>> {
        self.matmul_ext(a, b, true, alpha)
    }

    fn matmul_ext(&self, a: &Var<F>, b: &Var<F>, trans_b: bool, alpha: F) -> Result<Var<F>> {
        let (ash, bsh) = (a.shape(), b.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        };
        if ash.len() < 2 || ash.len() != bsh.len() {
            return Err(mismatch());
        }
        let r = ash.len();
        if ash[..r - 2] != bsh[..r - 2] {
            return Err(mismatch());
        }
        let (m, k) = (ash[r - 2], ash[r - 1]);
        let (kb, n) = if trans_b {
            (bsh[r - 1], bsh[r - 2])
        } else {
            (bsh[r - 2], bsh[r - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let batch: usize = ash[..r - 2].iter().product();
        let mut out = vec![F::zero(); batch * m * n];
        let (ad, bd) = (a.value.data(), b.value.data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                alpha,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = ash[..r - 2].to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a: a.node,
            b: b.node,
            av: a.value.clone(),
            bv: b.value.clone(),
            trans_b,
            alpha,
            dims: (batch, m, k, n),
        };
        Ok(self.push(op, Tensor::from_parts(shape, out), &[a.node, b.node]))
    }

    /// Affine map over the last axis: `x[..., K] @ w[K, P] + b[P]`.
    pub fn linear(&self, x: &Var<F>, w: &Var<F>, b: Option<&Var<F>>) -> Result<Var<F>> {
        let xs = x.shape();
        let ws = w.shape();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if b.shape() != [n] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![n],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let rows = x.value.numel() / k;
        let mut out = vec![F::zero(); rows * n];
        if let Some(b) = b {
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(b.value.data());
            }
        }
        gemm(
            rows,
            k,
            n,
            F::one(),
            x.value.data(),
            false,
            w.value.data(),
            false,
            &mut out,
            b.is_some(),
        );
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        let bn = b.and_then(|b| b.node);
        let op = Op::Linear {
            x: x.node,
            w: w.node,
            b: bn,
            xv: x.value.clone(),
            wv: w.value.clone(),
        };
        Ok(self.push(op, Tensor::from_parts(shape, out), &[x.node, w.node, bn]))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&self, x: &Var<F>) -> Result<Var<F>> {
        if !x.value.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let (_, d) = rows_of(x.shape());
        let mut data = x.value.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            let inv = sum.recip();
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let out = Arc::new(Tensor::from_parts(x.shape().to_vec(), data));
        let op = Op::Softmax {
            x: x.node,
            out: out.clone(),
        };
        Ok(self.push_arc(op, out, &[x.node]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(
        &self,
        x: &Var<F>,
        gamma: &Var<F>,
        beta: &Var<F>,
        eps: f64,
    ) -> Result<Var<F>> {
        let (rows, d) = rows_of(x.shape());
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let eps = F::of(eps);
        let inv_d = F::of_usize(d).recip();
        let (g, b) = (gamma.value.data(), beta.value.data());
        let mut xhat = x.value.data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![F::zero(); rows * d];
        for (row, orow) in xhat.chunks_exact_mut(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for ((v, o), (&gi, &bi)) in row.iter_mut().zip(orow.iter_mut()).zip(g.iter().zip(b)) {
                *v = (*v - mean) * r;
                *o = *v * gi + bi;
            }
        }
        let tracked = self.tracking && any_tracked(&[x.node, gamma.node, beta.node]);
        let op = Op::LayerNorm {
            x: x.node,
            gamma: gamma.node,
            beta: beta.node,
            xhat: if tracked { xhat } else { Vec::new() },
            rstd,
            gv: gamma.value.clone(),
        };
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(op, out, &[x.node, gamma.node, beta.node]))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self, x: &Var<F>) -> Var<F> {
        let out = x.value.map(silu_scalar);
        self.push(Op::Silu(x.node, x.value.clone()), out, &[x.node])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: &Var<F>) -> Var<F> {
        let out = x.value.map(|v| gelu_scalar(v).0);
        self.push(Op::Gelu(x.node, x.value.clone()), out, &[x.node])
    }

    pub fn permute(&self, x: &Var<F>, axes: &[usize]) -> Result<Var<F>> {
        validate_permutation(axes, x.value.ndim())?;
        let out = x.value.permute(axes)?;
        Ok(self.push(Op::Permute(x.node, axes.to_vec()), out, &[x.node]))
    }

    pub fn reshape(&self, x: &Var<F>, shape: &[usize]) -> Result<Var<F>> {
        let out = (*x.value).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x.node), out, &[x.node]))
    }

    pub fn permute_reshape(&self, x: &Var<F>, axes: &[usize], shape: &[usize]) -> Result<Var<F>> {
        let p = self.permute(x, axes)?;
        self.reshape(&p, shape)
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&self, x: &Var<F>, mask: Tensor<F>) -> Result<Var<F>> {
        let out = x.value.zip_map(&mask, |a, m| a * m)?;
        Ok(self.push(Op::MulConst(x.node, Arc::new(mask)), out, &[x.node]))
    }

    pub fn sum(&self, x: &Var<F>) -> Var<F> {
        let s = x.value.data().iter().copied().sum::<F>();
        self.push(Op::Sum(x.node), Tensor::scalar(s), &[x.node])
    }

    pub fn mean(&self, x: &Var<F>) -> Var<F> {
        let s = x.value.data().iter().copied().sum::<F>() / F::of_usize(x.value.numel());
        self.push(Op::Mean(x.node), Tensor::scalar(s), &[x.node])
    }

    /// Mean squared difference between `pred` and `target`.
    pub fn mse(&self, pred: &Var<F>, target: &Var<F>) -> Result<Var<F>> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(&diff, &diff)?;
        Ok(self.mean(&sq))
    }

    /// Records an operation with a caller-supplied value and backward rule.
    pub fn custom(&self, inputs: &[&Var<F>], value: Tensor<F>, backward: BackwardFn<F>) -> Var<F> {
        let ids: Vec<Option<NodeId>> = inputs.iter().map(|v| v.node).collect();
        self.push(Op::Custom(ids.clone(), backward), value, &ids)
    }

    /// Propagates gradients from the scalar `loss` back to every tracked leaf.
    ///
    /// Consumes the recorded nodes; a second call fails with
    /// [`Error::TapeConsumed`].
    pub fn backward(&self, loss: &Var<F>) -> Result<Gradients<F>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let root = loss
            .node
            .ok_or_else(|| Error::NotDifferentiable("loss is not tracked".into()))?;
        if loss.value.numel() != 1 {
            return Err(Error::NotDifferentiable(format!(
                "loss has shape {:?}",
                loss.shape()
            )));
        }
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        self.consumed.set(true);

        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.shape.clone()).collect();
        let mut leaf_shapes = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) {
                leaf_shapes.insert(i, n.shape.clone());
            }
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root] = Some(Tensor::ones(&shapes[root]));
        let mut leaf_grads = HashMap::new();

        nodes.truncate(root + 1);
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(node.op, id, g, &shapes, &mut grads, &mut leaf_grads);
        }
        Ok(Gradients {
            grads: leaf_grads,
            leaf_shapes,
        })
    }
}

fn sigmoid<F: Element>(v: F) -> F {
    (F::one() + (-v).exp()).recip()
}

fn silu_scalar<F: Element>(v: F) -> F {
    v * sigmoid(v)
}

/// Returns `(gelu(v), d gelu / dv)` for the tanh approximation.
fn gelu_scalar<F: Element>(v: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let u = c * (v + k * v * v * v);
    let t = u.tanh();
    let y = half * v * (F::one() + t);
    let du = c * (F::one() + F::of(3.0) * k * v * v);
    let dy = half * (F::one() + t) + half * v * (F::one() - t * t) * du;
    (y, dy)
}

fn accumulate<F: Element>(grads: &mut [Option<Tensor<F>>], target: Option<NodeId>, g: Tensor<F>) {
    let Some(id) = target else { return };
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<F: Element>(
    op: Op<F>,
    id: NodeId,
    g: Tensor<F>,
    shapes: &[Vec<usize>],
    grads: &mut [Option<Tensor<F>>],
    leaf_grads: &mut HashMap<NodeId, Tensor<F>>,
) {
    match op {
        Op::Leaf => {
            leaf_grads.insert(id, g);
        }
        Op::Add(a, b) => {
            if b.is_some() {
                accumulate(grads, b, g.clone());
            }
            accumulate(grads, a, g);
        }
        Op::Sub(a, b) => {
            if b.is_some() {
                accumulate(grads, b, g.map(|v| -v));
            }
            accumulate(grads, a, g);
        }
        Op::Mul { a, b, av, bv } => {
            if a.is_some() {
                accumulate(grads, a, g.zip_map(&bv, |x, y| x * y).unwrap());
            }
            if b.is_some() {
                accumulate(grads, b, g.zip_map(&av, |x, y| x * y).unwrap());
            }
        }
        Op::Scale(x, f) => accumulate(grads, x, g.map(|v| v * f)),
        Op::AddTrailing { x, b, b_len } => {
            if let Some(bid) = b {
                let mut gb = vec![F::zero(); b_len];
                for chunk in g.data().chunks_exact(b_len) {
                    for (acc, &v) in gb.iter_mut().zip(chunk) {
                        *acc = *acc + v;
                    }
                }
                accumulate(
                    grads,
                    Some(bid),
                    Tensor::from_parts(shapes[bid].clone(), gb),
                );
            }
            accumulate(grads, x, g);
        }
        Op::MatMul {
            a,
            b,
            av,
            bv,
            trans_b,
            alpha,
            dims: (batch, m, k, n),
        } => {
            let gd = g.data();
            if let Some(aid) = a {
                let mut da = vec![F::zero(); batch * m * k];
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        alpha,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        !trans_b,
                        &mut da[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                accumulate(
                    grads,
                    Some(aid),
                    Tensor::from_parts(shapes[aid].clone(), da),
                );
            }
            if let Some(bid) = b {
                let mut db = vec![F::zero(); batch * k * n];
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let out = &mut db[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm(n, m, k, alpha, gi, true, ai, false, out, false);
                    } else {
                        gemm(k, m, n, alpha, ai, true, gi, false, out, false);
                    }
                }
                accumulate(
                    grads,
                    Some(bid),
                    Tensor::from_parts(shapes[bid].clone(), db),
                );
            }
        }
        Op::Linear { x, w, b, xv, wv } => {
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.numel() / k;
            if let Some(bid) = b {
                let mut gb = vec![F::zero(); n];
                for row in g.data().chunks_exact(n) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                accumulate(grads, Some(bid), Tensor::from_parts(vec![n], gb));
            }
            if let Some(wid) = w {
                let mut gw = vec![F::zero(); k * n];
                gemm(
                    k,
                    rows,
                    n,
                    F::one(),
                    xv.data(),
                    true,
                    g.data(),
                    false,
                    &mut gw,
                    false,
                );
                accumulate(grads, Some(wid), Tensor::from_parts(vec![k, n], gw));
            }
            if let Some(xid) = x {
                let mut gx = vec![F::zero(); rows * k];
                gemm(
                    rows,
                    n,
                    k,
                    F::one(),
                    g.data(),
                    false,
                    wv.data(),
                    true,
                    &mut gx,
                    false,
                );
                accumulate(
                    grads,
                    Some(xid),
                    Tensor::from_parts(shapes[xid].clone(), gx),
                );
            }
        }
        Op::Softmax { x, out } => {
            let d = *out.shape().last().unwrap();
            let mut gx = g.into_data();
            for (grow, yrow) in gx.chunks_exact_mut(d).zip(out.data().chunks_exact(d)) {
                let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<F>();
                for (gv, &y) in grow.iter_mut().zip(yrow) {
                    *gv = y * (*gv - dot);
                }
            }
            accumulate(grads, x, Tensor::from_parts(out.shape().to_vec(), gx));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            gv,
        } => {
            let d = gv.numel();
            let gd = g.data();
            if beta.is_some() || gamma.is_some() {
                let mut gg = vec![F::zero(); d];
                let mut gb = vec![F::zero(); d];
                for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] = gg[j] + grow[j] * hrow[j];
                        gb[j] = gb[j] + grow[j];
                    }
                }
                accumulate(grads, gamma, Tensor::from_parts(vec![d], gg));
                accumulate(grads, beta, Tensor::from_parts(vec![d], gb));
            }
            if let Some(xid) = x {
                let inv_d = F::of_usize(d).recip();
                let gamma_d = gv.data();
                let mut gx = vec![F::zero(); gd.len()];
                for (((grow, hrow), orow), &r) in gd
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .zip(&rstd)
                {
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for j in 0..d {
                        let dh = grow[j] * gamma_d[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hrow[j];
                    }
                    mean_dh = mean_dh * inv_d;
                    mean_dh_h = mean_dh_h * inv_d;
                    for j in 0..d {
                        let dh = grow[j] * gamma_d[j];
                        orow[j] = r * (dh - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
                accumulate(
                    grads,
                    Some(xid),
                    Tensor::from_parts(shapes[xid].clone(), gx),
                );
            }
        }
        Op::Silu(x, xv) => {
            let gx = g
                .zip_map(&xv, |gv, v| {
                    let s = sigmoid(v);
                    gv * s * (F::one() + v * (F::one() - s))
                })
                .unwrap();
            accumulate(grads, x, gx);
        }
        Op::Gelu(x, xv) => {
            let gx = g.zip_map(&xv, |gv, v| gv * gelu_scalar(v).1).unwrap();
            accumulate(grads, x, gx);
        }
        Op::Permute(x, axes) => {
            if let Some(xid) = x {
                let inv = inverse_permutation(&axes);
                let data = permute_data(g.data(), g.shape(), &inv);
                accumulate(
                    grads,
                    Some(xid),
                    Tensor::from_parts(shapes[xid].clone(), data),
                );
            }
        }
        Op::Reshape(x) => {
            if let Some(xid) = x {
                let data = g.into_data();
                accumulate(
                    grads,
                    Some(xid),
                    Tensor::from_parts(shapes[xid].clone(), data),
                );
            }
        }
        Op::MulConst(x, mask) => {
            accumulate(grads, x, g.zip_map(&mask, |a, m| a * m).unwrap());
        }
        Op::Sum(x) => {
            if let Some(xid) = x {
                accumulate(grads, Some(xid), Tensor::full(&shapes[xid], g.data()[0]));
            }
        }
        Op::Mean(x) => {
            if let Some(xid) = x {
                let n = F::of_usize(shapes[xid].iter().product());
                accumulate(
                    grads,
                    Some(xid),
                    Tensor::full(&shapes[xid], g.data()[0] / n),
                );
            }
        }
        Op::Custom(inputs, backward) => {
            let parts = backward(&g);
            for (input, part) in inputs.into_iter().zip(parts) {
                if let Some(iid) = input {
                    assert_eq!(
                        part.shape(),
                        shapes[iid].as_slice(),
                        "custom backward returned a gradient of the wrong shape"
                    );
                    accumulate(grads, Some(iid), part);
                }
            }
        }
    }
}
