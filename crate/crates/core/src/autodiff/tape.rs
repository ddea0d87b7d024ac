use std::cell::Cell;
use std::ops::Range;

use super::tensor::{broadcast_shape, Tensor};
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Neg,
    Square,
}

impl UnaryKind {
    pub const ALL: [UnaryKind; 7] = [
        UnaryKind::Tanh,
        UnaryKind::Sigmoid,
        UnaryKind::Exp,
        UnaryKind::Log,
        UnaryKind::Softplus,
        UnaryKind::Neg,
        UnaryKind::Square,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Neg => "neg",
            UnaryKind::Square => "square",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceKind {
    Sum,
    Mean,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<UnaryKind>> = const { Cell::new(None) };
}

/// Corrupts the backward rule of one unary op on the current thread.
/// Only meant for exercising gradient-check failure paths.
#[doc(hidden)]
pub fn set_backward_fault(kind: Option<UnaryKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var),
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        axis: Option<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Reshape {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Every operation appends a node whose inputs were appended earlier, so the
/// node order is a topological order. Nodes whose inputs are all constants are
/// stored as constants themselves and cost nothing in the backward pass.
///
/// Binary operations broadcast by the trailing-dimension rule only: the
/// lower-rank operand's shape must equal the trailing dimensions of the other
/// operand (a scalar `[]` broadcasts against anything). Gradients of a
/// broadcast operand are summed over the broadcast leading axes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by the tape's vars.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c (+)= op(a) · op(b)` for an `m×k` by `k×n` product, with arbitrary
/// element strides on both inputs.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and `c` (m×n, row-major) as checked by the callers' shape validation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `x`: gradients do not flow through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let value = match kind {
            UnaryKind::Tanh => xv.map(f64::tanh),
            UnaryKind::Sigmoid => xv.map(sigmoid),
            UnaryKind::Exp => xv.map(f64::exp),
            UnaryKind::Log => {
                if let Some(&bad) = xv.data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
                    return Err(AutodiffError::Domain {
                        op: "log",
                        value: bad,
                    });
                }
                xv.map(f64::ln)
            }
            UnaryKind::Softplus => xv.map(softplus),
            UnaryKind::Neg => xv.map(|v| -v),
            UnaryKind::Square => xv.map(|v| v * v),
        };
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Unary(kind, x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let bv = self.value(b);
        let shape =
            broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| AutodiffError::Broadcast {
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            })?;
        if kind == BinaryKind::Div && bv.data().iter().any(|&v| v == 0.0) {
            return Err(AutodiffError::DivisionByZero);
        }
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = if ad.len() == bd.len() {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else if ad.len() > bd.len() {
            let n = bd.len();
            ad.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % n]))
                .collect()
        } else {
            let n = ad.len();
            bd.iter()
                .enumerate()
                .map(|(i, &y)| f(ad[i % n], y))
                .collect()
        };
        let value = Tensor::new(shape, data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.requires_grad(x);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.requires_grad(x);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || AutodiffError::MatMul {
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
            transpose_b,
        };
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (n, kb) = if transpose_b {
            (bv.shape()[0], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[0])
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        let b_strides = if transpose_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        gemm(
            m,
            k,
            n,
            av.data(),
            (k as isize, 1),
            bv.data(),
            b_strides,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::MatMul { a, b, transpose_b }, rg))
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, true)
    }

    pub fn reduce(
        &mut self,
        kind: ReduceKind,
        x: Var,
        axis: Option<usize>,
    ) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let value = match axis {
            None => {
                let s: f64 = xv.data().iter().sum();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / xv.len() as f64,
                };
                Tensor::scalar(v)
            }
            Some(ax) => {
                if ax >= xv.rank() {
                    return Err(AutodiffError::Axis {
                        axis: ax,
                        rank: xv.rank(),
                    });
                }
                let (outer, n, inner) = split_axis(xv.shape(), ax);
                let d = xv.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                if kind == ReduceKind::Mean && n > 0 {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
                let mut shape = xv.shape().to_vec();
                shape.remove(ax);
                Tensor::new(shape, out)?
            }
        };
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reduce { kind, x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.reduce(ReduceKind::Sum, x, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.reduce(ReduceKind::Mean, x, None)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.reduce(ReduceKind::Sum, x, Some(axis))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs.first().ok_or(AutodiffError::EmptyConcat)?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::Axis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::Concat {
                    axis,
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let w = val.shape()[axis] * inner;
                out.extend_from_slice(&val.data()[o * w..(o + 1) * w]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        range: Range<usize>,
    ) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(AutodiffError::Axis {
                axis,
                rank: xv.rank(),
            });
        }
        let dim = xv.shape()[axis];
        if range.start > range.end || range.end > dim {
            return Err(AutodiffError::SliceBounds {
                start: range.start,
                end: range.end,
                dim,
            });
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let w = (range.end - range.start) * inner;
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            let start = (o * n + range.start) * inner;
            out.extend_from_slice(&xv.data()[start..start + w]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = range.end - range.start;
        let value = Tensor::new(shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::Slice {
                x,
                axis,
                start: range.start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the tape.
    ///
    /// Every node is visited at most once, in reverse recording order;
    /// gradients from multiple uses of a value are summed. Only leaf
    /// gradients are retained in the result.
    pub fn backward(self, loss: Var) -> Result<Gradients, AutodiffError> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        let fault = BACKWARD_FAULT.with(|f| f.get());

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Unary(kind, x) => {
                    let xv = nodes[x.0].value.data();
                    let y = node.value.data();
                    let mut gx: Vec<f64> = match kind {
                        UnaryKind::Tanh => g
                            .data()
                            .iter()
                            .zip(y)
                            .map(|(&g, &y)| g * (1.0 - y * y))
                            .collect(),
                        UnaryKind::Sigmoid => g
                            .data()
                            .iter()
                            .zip(y)
                            .map(|(&g, &y)| g * y * (1.0 - y))
                            .collect(),
                        UnaryKind::Exp => g.data().iter().zip(y).map(|(&g, &y)| g * y).collect(),
                        UnaryKind::Log => g.data().iter().zip(xv).map(|(&g, &x)| g / x).collect(),
                        UnaryKind::Softplus => g
                            .data()
                            .iter()
                            .zip(xv)
                            .map(|(&g, &x)| g * sigmoid(x))
                            .collect(),
                        UnaryKind::Neg => g.data().iter().map(|&g| -g).collect(),
                        UnaryKind::Square => g
                            .data()
                            .iter()
                            .zip(xv)
                            .map(|(&g, &x)| 2.0 * g * x)
                            .collect(),
                    };
                    if fault == Some(*kind) {
                        gx.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    accumulate(&mut grads, *x, node.value.shape(), gx);
                }
                Op::Binary(kind, a, b) => {
                    let (a, b) = (*a, *b);
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let gd = g.data();
                    let (na, nb) = (av.len(), bv.len());
                    let ai = |i: usize| av.data()[i % na];
                    let bi = |i: usize| bv.data()[i % nb];
                    if needs(a) {
                        let ga: Vec<f64> = match kind {
                            BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                            BinaryKind::Mul => (0..gd.len()).map(|i| gd[i] * bi(i)).collect(),
                            BinaryKind::Div => (0..gd.len()).map(|i| gd[i] / bi(i)).collect(),
                        };
                        accumulate_reduced(&mut grads, a, av.shape(), node.value.shape(), ga);
                    }
                    if needs(b) {
                        let gb: Vec<f64> = match kind {
                            BinaryKind::Add => gd.to_vec(),
                            BinaryKind::Sub => gd.iter().map(|&g| -g).collect(),
                            BinaryKind::Mul => (0..gd.len()).map(|i| gd[i] * ai(i)).collect(),
                            BinaryKind::Div => (0..gd.len())
                                .map(|i| {
                                    let bb = bi(i);
                                    -gd[i] * ai(i) / (bb * bb)
                                })
                                .collect(),
                        };
                        accumulate_reduced(&mut grads, b, bv.shape(), node.value.shape(), gb);
                    }
                }
                Op::MatMul { a, b, transpose_b } => {
                    let (a, b) = (*a, *b);
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = node.value.shape()[1];
                    let gd = g.data();
                    if needs(a) {
                        // ga[m×k] = g[m×n] · op(b)ᵀ
                        let mut ga = vec![0.0; m * k];
                        let b_strides = if *transpose_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        gemm(
                            m,
                            n,
                            k,
                            gd,
                            (n as isize, 1),
                            bv.data(),
                            b_strides,
                            &mut ga,
                            false,
                        );
                        accumulate(&mut grads, a, av.shape(), ga);
                    }
                    if needs(b) {
                        let mut gb = vec![0.0; k * n];
                        if *transpose_b {
                            // gb[n×k] = gᵀ[n×m] · a[m×k]
                            gemm(
                                n,
                                m,
                                k,
                                gd,
                                (1, n as isize),
                                av.data(),
                                (k as isize, 1),
                                &mut gb,
                                false,
                            );
                        } else {
                            // gb[k×n] = aᵀ[k×m] · g[m×n]
                            gemm(
                                k,
                                m,
                                n,
                                av.data(),
                                (1, k as isize),
                                gd,
                                (n as isize, 1),
                                &mut gb,
                                false,
                            );
                        }
                        accumulate(&mut grads, b, bv.shape(), gb);
                    }
                }
                Op::Reduce { kind, x, axis } => {
                    let xv = &nodes[x.0].value;
                    let gx = match axis {
                        None => {
                            let s = match kind {
                                ReduceKind::Sum => g.item(),
                                ReduceKind::Mean => g.item() / xv.len() as f64,
                            };
                            vec![s; xv.len()]
                        }
                        Some(ax) => {
                            let (outer, n, inner) = split_axis(xv.shape(), *ax);
                            let scale = match kind {
                                ReduceKind::Sum => 1.0,
                                ReduceKind::Mean => 1.0 / n as f64,
                            };
                            let mut gx = Vec::with_capacity(xv.len());
                            for o in 0..outer {
                                let src = &g.data()[o * inner..(o + 1) * inner];
                                for _ in 0..n {
                                    gx.extend(src.iter().map(|&v| v * scale));
                                }
                            }
                            gx
                        }
                    };
                    accumulate(&mut grads, *x, xv.shape(), gx);
                }
                Op::Concat { inputs, axis } => {
                    let shape = node.value.shape();
                    let (outer, total, inner) = split_axis(shape, *axis);
                    let mut offset = 0;
                    for &v in inputs {
                        let vs = nodes[v.0].value.shape();
                        let n = vs[*axis];
                        if needs(v) {
                            let mut gv = Vec::with_capacity(outer * n * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                gv.extend_from_slice(&g.data()[start..start + n * inner]);
                            }
                            accumulate(&mut grads, v, vs, gv);
                        }
                        offset += n;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xs = nodes[x.0].value.shape();
                    let (outer, n, inner) = split_axis(xs, *axis);
                    let w = node.value.shape()[*axis] * inner;
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        gx[dst..dst + w].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
                    }
                    accumulate(&mut grads, *x, xs, gx);
                }
                Op::Affine { x, scale } => {
                    let gx = g.data().iter().map(|&v| v * scale).collect();
                    accumulate(&mut grads, *x, node.value.shape(), gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = nodes[x.0].value.data();
                    let gx = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x < *lo || x > *hi { 0.0 } else { g })
                        .collect();
                    accumulate(&mut grads, *x, node.value.shape(), gx);
                }
                Op::Reshape { x } => {
                    let xs = nodes[x.0].value.shape();
                    accumulate(&mut grads, *x, xs, g.into_data());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
        }
    }
}

/// Accumulates `g` (shaped like the broadcast output) into an operand that
/// may have been broadcast along leading axes.
fn accumulate_reduced(
    grads: &mut [Option<Tensor>],
    v: Var,
    shape: &[usize],
    out_shape: &[usize],
    g: Vec<f64>,
) {
    if shape == out_shape {
        accumulate(grads, v, shape, g);
        return;
    }
    let n: usize = shape.iter().product();
    let mut reduced = vec![0.0; n];
    for (i, x) in g.iter().enumerate() {
        reduced[i % n] += x;
    }
    accumulate(grads, v, shape, reduced);
}
