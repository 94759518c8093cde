//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation as it is evaluated (define-by-run). Values live in
//! one arena, so building a tape for a single event costs little beyond the arithmetic.
//! [`Tape::replay`] re-evaluates a recorded graph with new parameter values, which is
//! what [`check_gradients`] uses for its central differences. Nodes created with
//! [`Tape::constant`] keep their value under replay, so numerically computed quantities
//! (root-finder solutions, stop-gradient samples) stay frozen.
//!
//! Shape errors do not panic: the tape is poisoned, later operations return dummy
//! nodes, and the first error is reported by [`Tape::backward_into`] and friends.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::specfun;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("backward requested before any forward evaluation of {0:?}")]
    NotForwarded(Var),
    #[error("shape mismatch in {op}: {a:?} vs {b:?}")]
    ShapeMismatch { op: &'static str, a: (usize, usize), b: (usize, usize) },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("index {index} out of range for length {len} in {op}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("parameter vector has {got} values, tape expects at least {want}")]
    ParamLength { got: usize, want: usize },
    #[error("unknown parameter slot {0}")]
    UnknownSlot(String),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Erf,
    Acos,
    Sin,
    Cos,
    Softplus,
    LogSigmoid,
    Square,
    Sqrt,
    LnGamma,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const,
    Param { offset: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Unary(Var, Unary),
    ClampMin(Var, f64),
    Atan2(Var, Var),
    MatMul(Var, Var),
    Linear { w: Var, x: Var, b: Var },
    Sum(Var),
    Lse(Var),
    LseCols(Var),
    Softmax(Var),
    Slice { a: Var, start: usize },
    Gather { a: Var, start: usize },
    SelectCols { a: Var, start: usize },
    Concat { start: usize, len: usize },
    Probit(Var, Var),
    StopGrad(Var),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    off: usize,
    rows: usize,
    cols: usize,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Recording of one forward evaluation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    grads: Vec<f64>,
    idx: Vec<usize>,
    links: Vec<Var>,
    error: Option<GradError>,
}

fn bshape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let r = if a.0 == b.0 || b.0 == 1 {
        a.0
    } else if a.0 == 1 {
        b.0
    } else {
        return None;
    };
    let c = if a.1 == b.1 || b.1 == 1 {
        a.1
    } else if a.1 == 1 {
        b.1
    } else {
        return None;
    };
    Some((r, c))
}

#[inline]
fn bidx(shape: (usize, usize), i: usize, j: usize) -> usize {
    (if shape.0 == 1 { 0 } else { i }) * shape.1 + if shape.1 == 1 { 0 } else { j }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const ACOS_CLAMP: f64 = 1.0 - 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes but keeps the allocated capacity.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.idx.clear();
        self.links.clear();
        self.error = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First error recorded while building, if any.
    pub fn error(&self) -> Option<&GradError> {
        self.error.as_ref()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.index()];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.index()];
        &self.vals[n.off..n.off + n.len()]
    }

    /// First element of a node's value.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn poison(&mut self, e: GradError) -> Var {
        if self.error.is_none() {
            self.error = Some(e);
        }
        self.push(Op::Const, 1, 1, Some(&[f64::NAN]))
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, init: Option<&[f64]>) -> Var {
        let off = self.vals.len();
        let len = rows * cols;
        match init {
            Some(v) => self.vals.extend_from_slice(v),
            None => self.vals.resize(off + len, 0.0),
        }
        self.nodes.push(Node { op, off, rows, cols });
        let id = self.nodes.len() - 1;
        if init.is_none() {
            self.eval_node(id, None);
        }
        Var(id as u32)
    }

    /// Constant matrix (row-major). Constants are frozen under replay.
    pub fn constant(&mut self, values: &[f64], rows: usize, cols: usize) -> Var {
        if values.len() != rows * cols {
            return self.poison(GradError::ShapeMismatch {
                op: "constant",
                a: (values.len(), 1),
                b: (rows, cols),
            });
        }
        self.push(Op::Const, rows, cols, Some(values))
    }

    pub fn vector(&mut self, values: &[f64]) -> Var {
        self.constant(values, values.len(), 1)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(&[v], 1, 1)
    }

    /// Loads a parameter slot; gradients flow back into the slot's offset.
    pub fn param(&mut self, params: &ParamVector, slot: Slot) -> Var {
        let vals = &params.values[slot.offset..slot.offset + slot.rows * slot.cols];
        self.push(Op::Param { offset: slot.offset }, slot.rows, slot.cols, Some(vals))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, mk: fn(Var, Var) -> Op) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match bshape(sa, sb) {
            Some((r, c)) => self.push(mk(a, b), r, c, None),
            None => self.poison(GradError::ShapeMismatch { op: name, a: sa, b: sb }),
        }
    }

    /// Elementwise sum with broadcasting of unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary("add", a, b, Op::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary("sub", a, b, Op::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary("mul", a, b, Op::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary("div", a, b, Op::Div)
    }
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        self.binary("atan2", y, x, Op::Atan2)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, cc) = self.shape(a);
        self.push(Op::Scale(a, c), r, cc, None)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let (r, cc) = self.shape(a);
        self.push(Op::Offset(a, c), r, cc, None)
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Unary(a, u), r, c, None)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn erf(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Erf)
    }
    /// `arccos` with the argument clamped to `[-1 + 1e-12, 1 - 1e-12]`.
    pub fn acos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Acos)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LogSigmoid)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    /// `ln Gamma(x)` for positive arguments.
    pub fn ln_gamma(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LnGamma)
    }

    /// `max(a, c)` elementwise; no gradient where the floor is active.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let (r, cc) = self.shape(a);
        self.push(Op::ClampMin(a, c), r, cc, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return self.poison(GradError::ShapeMismatch { op: "matmul", a: sa, b: sb });
        }
        self.push(Op::MatMul(a, b), sa.0, sb.1, None)
    }

    /// `W x + b`, with the column vector `b` broadcast over the columns of `x`.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Var {
        let (sw, sx, sb) = (self.shape(w), self.shape(x), self.shape(b));
        if sw.1 != sx.0 {
            return self.poison(GradError::ShapeMismatch { op: "linear", a: sw, b: sx });
        }
        if sb != (sw.0, 1) {
            return self.poison(GradError::ShapeMismatch { op: "linear bias", a: sw, b: sb });
        }
        self.push(Op::Linear { w, x, b }, sw.0, sx.1, None)
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a), 1, 1, None)
    }

    /// `ln sum exp` over all elements.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        self.push(Op::Lse(a), 1, 1, None)
    }

    /// Column-wise `ln sum exp`, reducing the rows: `(r, c) -> (1, c)`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let c = self.shape(a).1;
        self.push(Op::LseCols(a), 1, c, None)
    }

    /// Softmax over all elements.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Softmax(a), r, c, None)
    }

    /// Contiguous row-major range `[start, start + rows * cols)` reshaped to `(rows, cols)`.
    pub fn slice(&mut self, a: Var, start: usize, rows: usize, cols: usize) -> Var {
        let n = self.nodes[a.index()].len();
        if start + rows * cols > n {
            return self.poison(GradError::IndexOutOfRange { op: "slice", index: start + rows * cols, len: n });
        }
        self.push(Op::Slice { a, start }, rows, cols, None)
    }

    /// Rows `[r0, r0 + nr)` of a matrix.
    pub fn rows(&mut self, a: Var, r0: usize, nr: usize) -> Var {
        let c = self.shape(a).1;
        self.slice(a, r0 * c, nr, c)
    }

    /// Flat gather `out[k] = a[indices[k]]`, returned as a column vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Var {
        let n = self.nodes[a.index()].len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return self.poison(GradError::IndexOutOfRange { op: "gather", index: bad, len: n });
        }
        let start = self.idx.len();
        self.idx.extend_from_slice(indices);
        self.push(Op::Gather { a, start }, indices.len(), 1, None)
    }

    /// Column selection `out[:, k] = a[:, cols[k]]`.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let (r, c) = self.shape(a);
        if let Some(&bad) = cols.iter().find(|&&i| i >= c) {
            return self.poison(GradError::IndexOutOfRange { op: "select_cols", index: bad, len: c });
        }
        let start = self.idx.len();
        self.idx.extend_from_slice(cols);
        self.push(Op::SelectCols { a, start }, r, cols.len(), None)
    }

    /// Flat concatenation of all inputs into a column vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let total: usize = parts.iter().map(|p| self.nodes[p.index()].len()).sum();
        let start = self.links.len();
        self.links.extend_from_slice(parts);
        self.push(Op::Concat { start, len: parts.len() }, total, 1, None)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let c = self.shape(parts[0]).1;
        let mut rows = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.1 != c {
                return self.poison(GradError::ShapeMismatch { op: "vstack", a: (rows, c), b: s });
            }
            rows += s.0;
        }
        let start = self.links.len();
        self.links.extend_from_slice(parts);
        self.push(Op::Concat { start, len: parts.len() }, rows, c, None)
    }

    /// `Phi^{-1}(u)` elementwise, given `ln u` and `ln(1 - u)` as separate inputs so both
    /// tails keep full precision.
    pub fn probit(&mut self, ln_u: Var, ln_1mu: Var) -> Var {
        let (sa, sb) = (self.shape(ln_u), self.shape(ln_1mu));
        if sa != sb {
            return self.poison(GradError::ShapeMismatch { op: "probit", a: sa, b: sb });
        }
        self.push(Op::Probit(ln_u, ln_1mu), sa.0, sa.1, None)
    }

    /// Identity in the forward pass, blocks all gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::StopGrad(a), r, c, None)
    }

    fn eval_node(&mut self, id: usize, params: Option<&ParamVector>) {
        let node = self.nodes[id];
        let (lower, upper) = self.vals.split_at_mut(node.off);
        let out = &mut upper[..node.len()];
        let nodes = &self.nodes;
        let get = |v: Var| -> (&[f64], (usize, usize)) {
            let n = &nodes[v.index()];
            (&lower[n.off..n.off + n.len()], (n.rows, n.cols))
        };
        let oshape = (node.rows, node.cols);
        match node.op {
            Op::Const => {}
            Op::Param { offset } => {
                if let Some(p) = params {
                    out.copy_from_slice(&p.values[offset..offset + out.len()]);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Atan2(a, b) => {
                let ((va, sa), (vb, sb)) = (get(a), get(b));
                let f: fn(f64, f64) -> f64 = match node.op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    Op::Mul(..) => |x, y| x * y,
                    Op::Div(..) => |x, y| x / y,
                    _ => f64::atan2,
                };
                if sa == oshape && sb == oshape {
                    for ((o, x), y) in out.iter_mut().zip(va).zip(vb) {
                        *o = f(*x, *y);
                    }
                } else {
                    for i in 0..oshape.0 {
                        for j in 0..oshape.1 {
                            out[i * oshape.1 + j] = f(va[bidx(sa, i, j)], vb[bidx(sb, i, j)]);
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                for (o, x) in out.iter_mut().zip(get(a).0) {
                    *o = x * c;
                }
            }
            Op::Offset(a, c) => {
                for (o, x) in out.iter_mut().zip(get(a).0) {
                    *o = x + c;
                }
            }
            Op::ClampMin(a, c) => {
                for (o, x) in out.iter_mut().zip(get(a).0) {
                    *o = x.max(c);
                }
            }
            Op::Unary(a, u) => {
                let va = get(a).0;
                let f: fn(f64) -> f64 = match u {
                    Unary::Tanh => f64::tanh,
                    Unary::Sigmoid => sigmoid,
                    Unary::Exp => f64::exp,
                    Unary::Log => f64::ln,
                    Unary::Erf => specfun::erf,
                    Unary::Acos => |x| x.clamp(-ACOS_CLAMP, ACOS_CLAMP).acos(),
                    Unary::Sin => f64::sin,
                    Unary::Cos => f64::cos,
                    Unary::Softplus => softplus,
                    Unary::LogSigmoid => |x| -softplus(-x),
                    Unary::Square => |x| x * x,
                    Unary::Sqrt => f64::sqrt,
                    Unary::LnGamma => specfun::ln_gamma,
                };
                for (o, x) in out.iter_mut().zip(va) {
                    *o = f(*x);
                }
            }
            Op::MatMul(a, b) => {
                let ((va, sa), (vb, sb)) = (get(a), get(b));
                out.fill(0.0);
                matmul_acc(out, va, sa, vb, sb.1);
            }
            Op::Linear { w, x, b } => {
                let ((vw, sw), (vx, sx), (vb, _)) = (get(w), get(x), get(b));
                let c = sx.1;
                for i in 0..sw.0 {
                    out[i * c..(i + 1) * c].fill(vb[i]);
                }
                matmul_acc(out, vw, sw, vx, c);
            }
            Op::Sum(a) => out[0] = get(a).0.iter().sum(),
            Op::Lse(a) => out[0] = lse(get(a).0),
            Op::LseCols(a) => {
                let (va, sa) = get(a);
                for j in 0..sa.1 {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..sa.0 {
                        m = m.max(va[i * sa.1 + j]);
                    }
                    if m == f64::NEG_INFINITY {
                        out[j] = m;
                        continue;
                    }
                    let mut s = 0.0;
                    for i in 0..sa.0 {
                        s += (va[i * sa.1 + j] - m).exp();
                    }
                    out[j] = m + s.ln();
                }
            }
            Op::Softmax(a) => {
                let va = get(a).0;
                let l = lse(va);
                for (o, x) in out.iter_mut().zip(va) {
                    *o = (x - l).exp();
                }
            }
            Op::Slice { a, start } => {
                let va = get(a).0;
                out.copy_from_slice(&va[start..start + out.len()]);
            }
            Op::Gather { a, start } => {
                let va = get(a).0;
                for (k, o) in out.iter_mut().enumerate() {
                    *o = va[self.idx[start + k]];
                }
            }
            Op::SelectCols { a, start } => {
                let (va, sa) = get(a);
                let nc = node.cols;
                for i in 0..sa.0 {
                    for k in 0..nc {
                        out[i * nc + k] = va[i * sa.1 + self.idx[start + k]];
                    }
                }
            }
            Op::Concat { start, len } => {
                let mut pos = 0;
                for &p in &self.links[start..start + len] {
                    let v = get(p).0;
                    out[pos..pos + v.len()].copy_from_slice(v);
                    pos += v.len();
                }
            }
            Op::Probit(a, b) => {
                let (va, vb) = (get(a).0, get(b).0);
                for ((o, lu), l1) in out.iter_mut().zip(va).zip(vb) {
                    *o = specfun::probit_from_logs(*lu, *l1);
                }
            }
            Op::StopGrad(a) => out.copy_from_slice(get(a).0),
        }
    }

    /// Re-evaluates every node with new parameter values. Constants keep their values.
    pub fn replay(&mut self, params: &ParamVector) -> Result<(), GradError> {
        if let Some(e) = &self.error {
            return Err(e.clone());
        }
        for id in 0..self.nodes.len() {
            if let Op::Param { offset } = self.nodes[id].op {
                let want = offset + self.nodes[id].len();
                if params.values.len() < want {
                    return Err(GradError::ParamLength { got: params.values.len(), want });
                }
            }
            self.eval_node(id, Some(params));
        }
        Ok(())
    }

    /// Backpropagates from the scalar `output`, adding `scale * d output / d params` into `grad`.
    pub fn backward_into(&mut self, output: Var, grad: &mut [f64], scale: f64) -> Result<(), GradError> {
        if let Some(e) = &self.error {
            return Err(e.clone());
        }
        if output.index() >= self.nodes.len() {
            return Err(GradError::NotForwarded(output));
        }
        let on = self.nodes[output.index()];
        if on.len() != 1 {
            return Err(GradError::NotScalar((on.rows, on.cols)));
        }
        self.grads.clear();
        self.grads.resize(on.off + 1, 0.0);
        self.grads[on.off] = scale;
        for id in (0..=output.index()).rev() {
            let node = self.nodes[id];
            let (lower, upper) = self.grads.split_at_mut(node.off);
            let g = &upper[..node.len()];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let v = &self.vals;
            let nodes = &self.nodes;
            let val = |x: Var| -> &[f64] {
                let n = &nodes[x.index()];
                &v[n.off..n.off + n.len()]
            };
            let sh = |x: Var| -> (usize, usize) {
                let n = &nodes[x.index()];
                (n.rows, n.cols)
            };
            let range = |x: Var| -> std::ops::Range<usize> {
                let n = &nodes[x.index()];
                n.off..n.off + n.len()
            };
            let y = &v[node.off..node.off + node.len()];
            let oshape = (node.rows, node.cols);
            match node.op {
                Op::Const | Op::StopGrad(_) => {}
                Op::Param { offset } => {
                    if grad.len() < offset + g.len() {
                        return Err(GradError::ParamLength { got: grad.len(), want: offset + g.len() });
                    }
                    for (d, s) in grad[offset..offset + g.len()].iter_mut().zip(g) {
                        *d += s;
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Atan2(a, b) => {
                    let (sa, sb) = (sh(a), sh(b));
                    let (ra, rb) = (range(a), range(b));
                    let (va, vb) = (val(a), val(b));
                    for i in 0..oshape.0 {
                        for j in 0..oshape.1 {
                            let k = i * oshape.1 + j;
                            let gk = g[k];
                            let (ia, ib) = (bidx(sa, i, j), bidx(sb, i, j));
                            let (x, z) = (va[ia], vb[ib]);
                            let (da, db) = match node.op {
                                Op::Add(..) => (gk, gk),
                                Op::Sub(..) => (gk, -gk),
                                Op::Mul(..) => (gk * z, gk * x),
                                Op::Div(..) => (gk / z, -gk * x / (z * z)),
                                _ => {
                                    let r2 = x * x + z * z;
                                    (gk * z / r2, -gk * x / r2)
                                }
                            };
                            lower[ra.start + ia] += da;
                            lower[rb.start + ib] += db;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    for (d, s) in lower[range(a)].iter_mut().zip(g) {
                        *d += c * s;
                    }
                }
                Op::Offset(a, _) => {
                    for (d, s) in lower[range(a)].iter_mut().zip(g) {
                        *d += s;
                    }
                }
                Op::ClampMin(a, c) => {
                    let ra = range(a);
                    for k in 0..g.len() {
                        if v[ra.start + k] > c {
                            lower[ra.start + k] += g[k];
                        }
                    }
                }
                Op::Unary(a, u) => {
                    let ra = range(a);
                    for k in 0..g.len() {
                        let x = v[ra.start + k];
                        let yk = y[k];
                        let d = match u {
                            Unary::Tanh => 1.0 - yk * yk,
                            Unary::Sigmoid => yk * (1.0 - yk),
                            Unary::Exp => yk,
                            Unary::Log => 1.0 / x,
                            Unary::Erf => 2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp(),
                            Unary::Acos => {
                                if x.abs() < ACOS_CLAMP {
                                    -1.0 / (1.0 - x * x).sqrt()
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sin => x.cos(),
                            Unary::Cos => -x.sin(),
                            Unary::Softplus => sigmoid(x),
                            Unary::LogSigmoid => sigmoid(-x),
                            Unary::Square => 2.0 * x,
                            Unary::Sqrt => 0.5 / yk,
                            Unary::LnGamma => specfun::digamma(x),
                        };
                        lower[ra.start + k] += g[k] * d;
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (sh(a), sh(b));
                    let (ra, rb) = (range(a), range(b));
                    matmul_backward(lower, g, v, ra, sa, rb, sb);
                }
                Op::Linear { w, x, b } => {
                    let (sw, sx) = (sh(w), sh(x));
                    let (rw, rx, rbias) = (range(w), range(x), range(b));
                    let c = sx.1;
                    for i in 0..sw.0 {
                        lower[rbias.start + i] += g[i * c..(i + 1) * c].iter().sum::<f64>();
                    }
                    matmul_backward(lower, g, v, rw, sw, rx, sx);
                }
                Op::Sum(a) => {
                    for d in lower[range(a)].iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Lse(a) => {
                    let ra = range(a);
                    for k in ra.clone() {
                        lower[k] += g[0] * (v[k] - y[0]).exp();
                    }
                }
                Op::LseCols(a) => {
                    let (sa, ra) = (sh(a), range(a));
                    for i in 0..sa.0 {
                        for j in 0..sa.1 {
                            let k = ra.start + i * sa.1 + j;
                            if y[j] > f64::NEG_INFINITY {
                                lower[k] += g[j] * (v[k] - y[j]).exp();
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let ra = range(a);
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for k in 0..g.len() {
                        lower[ra.start + k] += y[k] * (g[k] - dot);
                    }
                }
                Op::Slice { a, start } => {
                    let ra = range(a);
                    for (d, s) in lower[ra.start + start..ra.start + start + g.len()].iter_mut().zip(g) {
                        *d += s;
                    }
                }
                Op::Gather { a, start } => {
                    let ra = range(a);
                    for k in 0..g.len() {
                        lower[ra.start + self.idx[start + k]] += g[k];
                    }
                }
                Op::SelectCols { a, start } => {
                    let (sa, ra) = (sh(a), range(a));
                    let nc = node.cols;
                    for i in 0..sa.0 {
                        for k in 0..nc {
                            lower[ra.start + i * sa.1 + self.idx[start + k]] += g[i * nc + k];
                        }
                    }
                }
                Op::Concat { start, len } => {
                    let mut pos = 0;
                    for &p in &self.links[start..start + len] {
                        let rp = range(p);
                        let n = rp.len();
                        for (d, s) in lower[rp].iter_mut().zip(&g[pos..pos + n]) {
                            *d += s;
                        }
                        pos += n;
                    }
                }
                Op::Probit(a, b) => {
                    let (ra, rb) = (range(a), range(b));
                    for k in 0..g.len() {
                        let (lu, l1) = (v[ra.start + k], v[rb.start + k]);
                        let lphi = specfun::norm_ln_pdf(y[k]);
                        if lu <= l1 {
                            lower[ra.start + k] += g[k] * (lu - lphi).exp();
                        } else {
                            lower[rb.start + k] -= g[k] * (l1 - lphi).exp();
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Convenience wrapper returning a fresh gradient vector of length `n_params`.
    pub fn backward(&mut self, output: Var, n_params: usize) -> Result<Vec<f64>, GradError> {
        let mut g = vec![0.0; n_params];
        self.backward_into(output, &mut g, 1.0)?;
        Ok(g)
    }
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `out += A B` with `A: (r, k)`, `B: (k, c)`.
fn matmul_acc(out: &mut [f64], a: &[f64], sa: (usize, usize), b: &[f64], c: usize) {
    let (r, k) = sa;
    if c == 1 {
        for i in 0..r {
            let row = &a[i * k..(i + 1) * k];
            out[i] += row.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
        return;
    }
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let w = a[i * k + p];
            if w == 0.0 {
                continue;
            }
            for (o, x) in orow.iter_mut().zip(&b[p * c..(p + 1) * c]) {
                *o += w * x;
            }
        }
    }
}

/// Accumulates `dA += G B^T` and `dB += A^T G` into the gradient arena.
fn matmul_backward(
    grads: &mut [f64],
    g: &[f64],
    vals: &[f64],
    ra: std::ops::Range<usize>,
    sa: (usize, usize),
    rb: std::ops::Range<usize>,
    sb: (usize, usize),
) {
    let (r, k) = sa;
    let c = sb.1;
    let a = &vals[ra.clone()];
    let b = &vals[rb.clone()];
    if c == 1 {
        for i in 0..r {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            let da = &mut grads[ra.start + i * k..ra.start + (i + 1) * k];
            for (d, x) in da.iter_mut().zip(b) {
                *d += gi * x;
            }
        }
        let db = &mut grads[rb.clone()];
        for i in 0..r {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            for (d, w) in db.iter_mut().zip(&a[i * k..(i + 1) * k]) {
                *d += gi * w;
            }
        }
        return;
    }
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let s: f64 = grow.iter().zip(&b[p * c..(p + 1) * c]).map(|(x, y)| x * y).sum();
            grads[ra.start + i * k + p] += s;
        }
    }
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let w = a[i * k + p];
            if w == 0.0 {
                continue;
            }
            let db = &mut grads[rb.start + p * c..rb.start + (p + 1) * c];
            for (d, x) in db.iter_mut().zip(grow) {
                *d += w * x;
            }
        }
    }
}

/// Location of a named block inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with a name -> (offset, shape) layout. Slots are contiguous,
/// appended in creation order, and cover the value array exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    names: Vec<String>,
    slots: Vec<Slot>,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a slot filled with `init` (row-major, length `rows * cols`).
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: &[f64]) -> Slot {
        assert_eq!(init.len(), rows * cols, "initial values for {name} have the wrong length");
        assert!(self.slot(name).is_none(), "duplicate parameter slot {name}");
        let slot = Slot { offset: self.values.len(), rows, cols };
        self.values.extend_from_slice(init);
        self.names.push(name.to_string());
        self.slots.push(slot);
        slot
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.names.iter().position(|n| n == name).map(|i| self.slots[i])
    }

    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.values[slot.range()]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.values[slot.range()]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(name, slot)` pairs in layout order.
    pub fn layout(&self) -> impl Iterator<Item = (&str, Slot)> {
        self.names.iter().map(|s| s.as_str()).zip(self.slots.iter().copied())
    }

    /// Checks that slots tile the value array without gaps or overlap.
    pub fn validate(&self) -> Result<(), GradError> {
        let mut pos = 0;
        for (name, s) in self.layout() {
            if s.offset != pos {
                return Err(GradError::UnknownSlot(format!("{name} starts at {} instead of {pos}", s.offset)));
            }
            pos += s.len();
        }
        if pos != self.values.len() {
            return Err(GradError::ParamLength { got: self.values.len(), want: pos });
        }
        Ok(())
    }

    /// Boolean mask over values: true for every slot whose name starts with `prefix`.
    pub fn mask_prefix(&self, prefix: &str) -> Vec<bool> {
        let mut m = vec![false; self.values.len()];
        for (name, s) in self.layout() {
            if name.starts_with(prefix) {
                m[s.range()].fill(true);
            }
        }
        m
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the tape's analytic gradient of `output` with central differences obtained by
/// replaying the tape at `params +- eps e_i`. The relative error of index `i` is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`. With `indices = None`
/// every parameter is checked. The tape is replayed at `params` before returning.
pub fn check_gradients(
    tape: &mut Tape,
    output: Var,
    params: &ParamVector,
    eps: f64,
    floor: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheck, GradError> {
    tape.replay(params)?;
    let analytic = tape.backward(output, params.len())?;
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut p = params.clone();
    let mut best = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for &i in idx {
        let orig = p.values[i];
        p.values[i] = orig + eps;
        tape.replay(&p)?;
        let fp = tape.scalar(output);
        p.values[i] = orig - eps;
        tape.replay(&p)?;
        let fm = tape.scalar(output);
        p.values[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        best.checked += 1;
        if rel > best.max_rel_error || rel.is_nan() {
            best.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            best.worst_index = i;
            best.analytic = a;
            best.numeric = numeric;
        }
    }
    tape.replay(params)?;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(vals: &[f64]) -> (ParamVector, Slot) {
        let mut p = ParamVector::new();
        let s = p.add("x", vals.len(), 1, vals);
        (p, s)
    }

    #[test]
    fn product_rule() {
        let (p, s) = params(&[2.0, 3.0]);
        let mut t = Tape::new();
        let v = t.param(&p, s);
        let a = t.slice(v, 0, 1, 1);
        let b = t.slice(v, 1, 1, 1);
        let y = t.mul(a, b);
        assert_eq!(t.scalar(y), 6.0);
        let g = t.backward(y, 2).unwrap();
        assert_eq!(g, vec![3.0, 2.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let (p, s) = params(&[3.0]);
        let mut t = Tape::new();
        let x = t.param(&p, s);
        let sx = t.stop_gradient(x);
        let y = t.mul(sx, x);
        let g = t.backward(y, 1).unwrap();
        assert_eq!(g, vec![3.0]);
    }

    #[test]
    fn errors_are_reported() {
        let mut t = Tape::new();
        assert!(matches!(t.backward(Var(0), 0), Err(GradError::NotForwarded(_))));
        let a = t.vector(&[1.0, 2.0]);
        let b = t.vector(&[1.0, 2.0, 3.0]);
        let c = t.add(a, b);
        let s = t.sum(c);
        assert!(matches!(t.backward(s, 0), Err(GradError::ShapeMismatch { .. })));
        let mut t = Tape::new();
        let a = t.vector(&[1.0, 2.0]);
        assert!(matches!(t.backward(a, 0), Err(GradError::NotScalar(_))));
    }

    #[test]
    fn every_primitive_passes_a_gradient_check() {
        let mut p = ParamVector::new();
        let w = p.add("w", 3, 2, &[0.3, -0.2, 0.5, 0.1, -0.4, 0.7]);
        let x = p.add("x", 2, 4, &[0.2, -0.6, 0.9, 0.4, -0.3, 0.8, 0.05, -0.7]);
        let b = p.add("b", 3, 1, &[0.1, 0.0, -0.2]);
        let mut t = Tape::new();
        let (vw, vx, vb) = (t.param(&p, w), t.param(&p, x), t.param(&p, b));
        let l = t.linear(vw, vx, vb);
        let h = t.tanh(l);
        let m = t.matmul(vw, vx);
        let sg = t.sigmoid(m);
        let e = t.exp(sg);
        let lg = t.log(e);
        let ef = t.erf(h);
        let ac = t.acos(ef);
        let prod = t.mul(ac, lg);
        let lse = t.logsumexp_cols(prod);
        let row = t.rows(h, 1, 1);
        let at = t.atan2(row, lse);
        let sm = t.softmax(at);
        let cols = t.select_cols(h, &[3, 0, 0]);
        let gat = t.gather(cols, &[0, 4, 8, 2]);
        let cat = t.concat(&[sm, gat, vb]);
        let sq = t.square(cat);
        let sp = t.softplus(sq);
        let ls = t.log_sigmoid(cat);
        let b0 = t.slice(vb, 0, 1, 1);
        let b0 = t.offset(b0, 1.0);
        let dv = t.div(sp, b0);
        let dv = t.sum(dv);
        let s2 = t.sum(ls);
        let sn = t.sin(s2);
        let cs = t.cos(dv);
        let total = t.add(sn, cs);
        let lu = t.log_sigmoid(vb);
        let nb = t.neg(vb);
        let l1 = t.log_sigmoid(nb);
        let pr = t.probit(lu, l1);
        let prs = t.sum(pr);
        let sqr = t.sqrt(sp);
        let sqs = t.logsumexp(sqr);
        let total = t.add(total, prs);
        let total = t.add(total, sqs);
        let chk = check_gradients(&mut t, total, &p, 1e-6, 1e-6, None).unwrap();
        assert!(chk.max_rel_error < 1e-5, "{chk:?}");
    }

    #[test]
    fn replay_reproduces_values() {
        let (p, s) = params(&[0.4, -1.2]);
        let mut t = Tape::new();
        let x = t.param(&p, s);
        let y = t.tanh(x);
        let z = t.sum(y);
        let before = t.scalar(z);
        let mut q = p.clone();
        q.values[0] = 1.0;
        t.replay(&q).unwrap();
        assert!((t.scalar(z) - (1f64.tanh() + (-1.2f64).tanh())).abs() < 1e-15);
        t.replay(&p).unwrap();
        assert_eq!(t.scalar(z), before);
    }

    #[test]
    fn layout_is_contiguous() {
        let mut p = ParamVector::new();
        p.add("a", 2, 3, &[0.0; 6]);
        p.add("b.x", 1, 1, &[1.0]);
        p.validate().unwrap();
        assert_eq!(p.slot("b.x").unwrap().offset, 6);
        assert_eq!(p.mask_prefix("b.").iter().filter(|&&m| m).count(), 1);
    }
}
