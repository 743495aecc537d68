//! Dense tensors and a reverse-mode autodiff tape.
//!
//! The tape is define-by-run: a fresh [`Tape`] is built for every forward
//! pass, ops record their operands as they execute, and [`Tape::backward`]
//! replays the records in reverse. The primitive set is exactly what an MLP
//! with softmax/cross-entropy/KL losses needs; there is no broadcasting
//! beyond scalar-vs-tensor, which keeps every backward rule small enough to
//! finite-difference check exhaustively.
//!
//! [`finite_diff_grad`] is the independent oracle for those checks: central
//! differences over a flat parameter slice, shared by the unit tests, the
//! `gradcheck` CLI subcommand, and the acceptance suite.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::Real;

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

impl Tensor {
    /// New tensor; `data.len()` must equal the product of `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(x: Real) -> Self {
        Tensor::new(vec![1], vec![x])
    }

    /// Row-major `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<Real>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    /// Attaches a gradient buffer; must match the data length.
    pub fn set_grad(&mut self, grad: Vec<Real>) {
        assert_eq!(grad.len(), self.data.len(), "gradient length mismatch");
        self.grad = Some(grad);
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows; the tensor must be 2-D.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a 2-D tensor");
        self.shape[0]
    }

    /// Number of columns; the tensor must be 2-D.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a 2-D tensor");
        self.shape[1]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[Real] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }
}

/// Row-major matrix product `a (m x k) @ b (k x n)`.
pub(crate) fn matmul_2d(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
    c
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The primitives the tape records.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    /// Elementwise product; one operand may be a scalar.
    ScalarMul,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    Clamp {
        min: Real,
        max: Real,
    },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Clamp(Var, Real, Real),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<Real>,
    op: Op,
    /// True when this node's subgraph contains a differentiable leaf.
    track: bool,
}

/// Gradient of a scalar loss with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    /// Gradient for a leaf known to require one.
    pub fn expect(&self, leaf: Var) -> &Tensor {
        self.grads
            .get(&leaf)
            .expect("leaf was not registered with requires_grad")
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Define-by-run recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Registers a tensor as a tape input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let track = t.requires_grad;
        self.push(t.shape, t.data, Op::Leaf, track)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, x: Real) -> Var {
        self.constant(Tensor::scalar(x))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<Real>, op: Op, track: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[Real] {
        &self.nodes[v.0].data
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, v: Var) -> Real {
        assert_eq!(self.nodes[v.0].data.len(), 1, "not a scalar node");
        self.nodes[v.0].data[0]
    }

    /// Copies a node out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn track(&self, v: Var) -> bool {
        self.nodes[v.0].track
    }

    /// Uniform dispatch over the primitive set.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let want = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::ScalarMul => 2,
            _ => 1,
        };
        if inputs.len() != want {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} takes {want} input(s), got {}",
                inputs.len()
            )));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::ScalarMul => self.mul(inputs[0], inputs[1]),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Exp => Ok(self.exp(inputs[0])),
            OpKind::Log => Ok(self.log(inputs[0])),
            OpKind::Sum => Ok(self.sum(inputs[0])),
            OpKind::Mean => Ok(self.mean(inputs[0])),
            OpKind::Clamp { min, max } => Ok(self.clamp(inputs[0], min, max)),
        }
    }

    /// `a (m x k) @ b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_2d(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let track = self.track(a) || self.track(b);
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b), track))
    }

    fn elementwise_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (na, nb) = (self.nodes[a.0].data.len(), self.nodes[b.0].data.len());
        if sa == sb {
            Ok(sa.clone())
        } else if nb == 1 {
            Ok(sa.clone())
        } else if na == 1 {
            Ok(sb.clone())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let shape = self.elementwise_shapes(op, a, b)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let data = if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            let y = db[0];
            da.iter().map(|&x| f(x, y)).collect()
        } else {
            let x = da[0];
            db.iter().map(|&y| f(x, y)).collect()
        };
        let track = self.track(a) || self.track(b);
        Ok(self.push(shape, data, make(a, b), track))
    }

    /// Elementwise sum; one side may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    /// Elementwise difference; one side may be a scalar.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product; one side may be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("scalar_mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let s = self.scalar_const(c);
        self.mul(a, s).expect("scalar broadcast cannot fail")
    }

    fn unary(
        &mut self,
        v: Var,
        f: impl Fn(Real) -> Real,
        make: impl Fn(Var) -> Op,
    ) -> Var {
        let shape = self.nodes[v.0].shape.clone();
        let data = self.nodes[v.0].data.iter().map(|&x| f(x)).collect();
        let track = self.track(v);
        self.push(shape, data, make(v), track)
    }

    pub fn relu(&mut self, v: Var) -> Var {
        self.unary(v, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn exp(&mut self, v: Var) -> Var {
        self.unary(v, Real::exp, Op::Exp)
    }

    /// Natural log. Callers clamp first when inputs can touch zero.
    pub fn log(&mut self, v: Var) -> Var {
        self.unary(v, Real::ln, Op::Log)
    }

    /// Clamps into `[min, max]`; backward passes gradient only inside.
    pub fn clamp(&mut self, v: Var, min: Real, max: Real) -> Var {
        self.unary(v, |x| x.clamp(min, max), |i| Op::Clamp(i, min, max))
    }

    /// Sum of all entries (scalar output).
    pub fn sum(&mut self, v: Var) -> Var {
        let s: Real = self.nodes[v.0].data.iter().sum();
        let track = self.track(v);
        self.push(vec![1], vec![s], Op::Sum(v), track)
    }

    /// Mean of all entries (scalar output).
    pub fn mean(&mut self, v: Var) -> Var {
        let n = self.nodes[v.0].data.len() as Real;
        let s: Real = self.nodes[v.0].data.iter().sum();
        let track = self.track(v);
        self.push(vec![1], vec![s / n], Op::Mean(v), track)
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Returns dLoss/dLeaf for every leaf registered with `requires_grad`;
    /// leaves the loss does not depend on receive zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].track {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.track(a) {
                        // dA[i,p] += sum_j G[i,j] * B[p,j]
                        let da = self.grad_slot(&mut grads, a);
                        let bd = &self.nodes[b.0].data;
                        for r in 0..m {
                            let g_row = &g[r * n..(r + 1) * n];
                            let da_row = &mut da[r * k..(r + 1) * k];
                            for p in 0..k {
                                let b_row = &bd[p * n..(p + 1) * n];
                                let mut acc = 0.0;
                                for (gv, bv) in g_row.iter().zip(b_row) {
                                    acc += gv * bv;
                                }
                                da_row[p] += acc;
                            }
                        }
                    }
                    if self.track(b) {
                        // dB[p,j] += sum_i A[i,p] * G[i,j]
                        let db = self.grad_slot(&mut grads, b);
                        let ad = &self.nodes[a.0].data;
                        for r in 0..m {
                            let g_row = &g[r * n..(r + 1) * n];
                            let a_row = &ad[r * k..(r + 1) * k];
                            for (p, &a_rp) in a_row.iter().enumerate() {
                                let db_row = &mut db[p * n..(p + 1) * n];
                                for (dv, gv) in db_row.iter_mut().zip(g_row) {
                                    *dv += a_rp * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate_linear(&mut grads, a, &g, 1.0);
                    self.accumulate_linear(&mut grads, b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accumulate_linear(&mut grads, a, &g, 1.0);
                    self.accumulate_linear(&mut grads, b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (na, nb) = (self.nodes[a.0].data.len(), self.nodes[b.0].data.len());
                    if self.track(a) {
                        let contrib: Vec<Real> = if nb == g.len() {
                            g.iter()
                                .zip(&self.nodes[b.0].data)
                                .map(|(gv, bv)| gv * bv)
                                .collect()
                        } else {
                            let bv = self.nodes[b.0].data[0];
                            g.iter().map(|gv| gv * bv).collect()
                        };
                        self.accumulate_fitted(&mut grads, a, &contrib);
                    }
                    if self.track(b) {
                        let contrib: Vec<Real> = if na == g.len() {
                            g.iter()
                                .zip(&self.nodes[a.0].data)
                                .map(|(gv, av)| gv * av)
                                .collect()
                        } else {
                            let av = self.nodes[a.0].data[0];
                            g.iter().map(|gv| gv * av).collect()
                        };
                        self.accumulate_fitted(&mut grads, b, &contrib);
                    }
                }
                Op::Relu(a) => {
                    if self.track(a) {
                        let da = self.grad_slot(&mut grads, a);
                        for ((dv, gv), &xv) in da.iter_mut().zip(&g).zip(&self.nodes[a.0].data) {
                            if xv > 0.0 {
                                *dv += gv;
                            }
                        }
                    }
                }
                Op::Exp(a) => {
                    if self.track(a) {
                        let out = &self.nodes[i].data;
                        let da = self.grad_slot(&mut grads, a);
                        for ((dv, gv), &ev) in da.iter_mut().zip(&g).zip(out) {
                            *dv += gv * ev;
                        }
                    }
                }
                Op::Log(a) => {
                    if self.track(a) {
                        let da = self.grad_slot(&mut grads, a);
                        for ((dv, gv), &xv) in da.iter_mut().zip(&g).zip(&self.nodes[a.0].data) {
                            *dv += gv / xv;
                        }
                    }
                }
                Op::Sum(a) => {
                    if self.track(a) {
                        let gv = g[0];
                        let da = self.grad_slot(&mut grads, a);
                        for dv in da.iter_mut() {
                            *dv += gv;
                        }
                    }
                }
                Op::Mean(a) => {
                    if self.track(a) {
                        let gv = g[0] / self.nodes[a.0].data.len() as Real;
                        let da = self.grad_slot(&mut grads, a);
                        for dv in da.iter_mut() {
                            *dv += gv;
                        }
                    }
                }
                Op::Clamp(a, min, max) => {
                    if self.track(a) {
                        let da = self.grad_slot(&mut grads, a);
                        for ((dv, gv), &xv) in da.iter_mut().zip(&g).zip(&self.nodes[a.0].data) {
                            if xv >= min && xv <= max {
                                *dv += gv;
                            }
                        }
                    }
                }
            }
        }

        let mut map = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, true) = (&node.op, node.track) {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.data.len()]);
                map.insert(Var(i), Tensor::new(node.shape.clone(), data));
            }
        }
        Ok(Gradients { grads: map })
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<Real>>], v: Var) -> &'a mut Vec<Real> {
        grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()])
    }

    /// Adds `scale * g` into `v`, summing when `v` is a broadcast scalar.
    fn accumulate_linear(&self, grads: &mut [Option<Vec<Real>>], v: Var, g: &[Real], scale: Real) {
        if !self.track(v) {
            return;
        }
        let dv = self.grad_slot(grads, v);
        if dv.len() == g.len() {
            for (d, gv) in dv.iter_mut().zip(g) {
                *d += scale * gv;
            }
        } else {
            debug_assert_eq!(dv.len(), 1);
            dv[0] += scale * g.iter().sum::<Real>();
        }
    }

    /// Adds a full-size contribution into `v`, summing for broadcast scalars.
    fn accumulate_fitted(&self, grads: &mut [Option<Vec<Real>>], v: Var, contrib: &[Real]) {
        let dv = self.grad_slot(grads, v);
        if dv.len() == contrib.len() {
            for (d, c) in dv.iter_mut().zip(contrib) {
                *d += c;
            }
        } else {
            debug_assert_eq!(dv.len(), 1);
            dv[0] += contrib.iter().sum::<Real>();
        }
    }
}

/// Central-difference gradient of `f` at `theta`: the verification oracle.
///
/// Independent of the tape by construction; it only ever calls `f`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[Real], h: Real) -> Result<Vec<Real>>
where
    F: FnMut(&[Real]) -> Real,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite_diff_grad step must be positive, got {h}"
        )));
    }
    let mut probe = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Per-parameter relative error between two gradients, floored so that
/// near-zero components are compared absolutely.
pub fn max_rel_error(a: &[Real], b: &[Real]) -> Real {
    assert_eq!(a.len(), b.len());
    let mut worst: Real = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(1e-4);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}
