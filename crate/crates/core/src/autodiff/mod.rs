//! Tape-based reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every value is an `ndarray` matrix; scalars are `1 × 1`. Operations are
//! recorded on a [`Tape`] as they execute, so node indices are already a
//! topological order and the backward pass is a single reverse sweep.
//!
//! ```
//! use varifocal_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.scalar_var(2.0);
//! let y = tape.scalar_var(4.0);
//! let f = x * y + y.sqrt();
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(f.item(), 10.0);
//! assert_eq!(grads.get(x)[[0, 0]], 4.0);
//! assert_eq!(grads.get(y)[[0, 0]], 2.25);
//! ```
//!
//! Elementwise binary operations broadcast like `ndarray` (a `1 × 1` or
//! `1 × c` operand stretches over rows); the backward pass sums the gradient
//! back down to the operand's shape.
//!
//! Kinks (`relu` at 0, ties in `max`/`min`) take the left branch.

mod adam;

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use ndarray::{Array2, Axis};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("domain error in {op} at node {node} (element {index}, operand {value})")]
    Domain {
        op: &'static str,
        node: usize,
        index: usize,
        value: f64,
    },
    #[error("backward needs a 1x1 output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("non-finite gradient component at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("length mismatch: {params} parameters, {grads} gradients")]
    LengthMismatch { params: usize, grads: usize },
}

/// Backward rule for an operation defined outside the tape.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Powi(usize, i32),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Relu(usize),
    Max(usize, usize),
    Min(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Gather(usize, Vec<usize>),
    ScatterAdd(usize, Vec<usize>),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass. Not shareable across threads;
/// independent tapes may live on different threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<AutodiffError>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients from one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for the leaf `var`; exactly zero if `var` did not influence
    /// the output. Intermediate gradients are not retained.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                Tensor::zeros((r, c))
            }
        }
    }
}

fn shape(t: &Tensor) -> (usize, usize) {
    t.dim()
}

/// Sums `grad` over the axes along which an operand of `target` shape was broadcast.
fn reduce_to(grad: Tensor, target: (usize, usize)) -> Tensor {
    let mut g = grad;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

pub(crate) fn gather_rows(src: &Tensor, idx: &[usize]) -> Tensor {
    let cols = src.ncols();
    let data = src.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        out.extend_from_slice(&data[i * cols..(i + 1) * cols]);
    }
    Tensor::from_shape_vec((idx.len(), cols), out).expect("shape matches")
}

pub(crate) fn scatter_add_rows(src: &Tensor, idx: &[usize], rows: usize) -> Tensor {
    let cols = src.ncols();
    let data = src.as_slice().expect("standard layout");
    let mut out = vec![0.0; rows * cols];
    for (r, &i) in idx.iter().enumerate() {
        let dst = &mut out[i * cols..(i + 1) * cols];
        for (d, s) in dst.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *d += s;
        }
    }
    Tensor::from_shape_vec((rows, cols), out).expect("shape matches")
}

/// Hyperbolic tangent via `expm1`, accurate near zero and saturating cleanly.
pub(crate) fn tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp_m1();
    e / (e + 2.0)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(standard(value)),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn val(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn record_fault(&self, err: AutodiffError) {
        let mut fault = self.fault.borrow_mut();
        if fault.is_none() {
            *fault = Some(err);
        }
    }

    /// First domain error raised while recording, if any.
    pub fn fault(&self) -> Option<AutodiffError> {
        self.fault.borrow().clone()
    }

    /// A leaf that receives gradients.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_var(&self, x: f64) -> Var<'_> {
        self.var(Tensor::from_elem((1, 1), x))
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Tensor::from_elem((1, 1), x))
    }

    /// Column vector constant.
    pub fn column(&self, values: &[f64]) -> Var<'_> {
        self.constant(Tensor::from_shape_vec((values.len(), 1), values.to_vec()).expect("column"))
    }

    fn unary(&self, a: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    /// Concatenates along columns; all parts share the row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| self.val(p.id)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        self.push(out, Op::Concat(ids), rg)
    }

    /// Registers an externally computed value with a custom backward rule.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, op: impl CustomOp + 'static) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        self.push(value, Op::Custom(ids, Box::new(op)), rg)
    }

    /// Reverse sweep from a `1 × 1` output. The tape is left untouched, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AutodiffError> {
        if let Some(err) = self.fault() {
            return Err(err);
        }
        let nodes = self.nodes.borrow();
        let (rows, cols) = shape(&nodes[output.id].value);
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NonScalarOutput { rows, cols });
        }
        let n = output.id + 1;
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|nd| shape(&nd.value)).collect();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.id] = Some(Tensor::ones((1, 1)));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..n).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), shapes[*a]));
                    accumulate(&mut grads, *b, reduce_to(g.clone(), shapes[*b]));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), shapes[*a]));
                    accumulate(&mut grads, *b, reduce_to(-&g, shapes[*b]));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, reduce_to(&g * &**vb, shapes[*a]));
                    }
                    if nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, reduce_to(&g * &**va, shapes[*b]));
                    }
                }
                Op::Div(a, b) => {
                    let vb = &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, reduce_to(&g / &**vb, shapes[*a]));
                    }
                    if nodes[*b].requires_grad {
                        let gb = -(&g * &**out) / &**vb;
                        accumulate(&mut grads, *b, reduce_to(gb, shapes[*b]));
                    }
                }
                Op::Neg(a) => accumulate(&mut grads, *a, -&g),
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::Offset(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Powi(a, k) => {
                    let va = &nodes[*a].value;
                    let k = *k;
                    let d = va.mapv(|x| k as f64 * x.powi(k - 1));
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::Sqrt(a) => {
                    let d = out.mapv(|y| 0.5 / y);
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &**out),
                Op::Ln(a) => accumulate(&mut grads, *a, &g / &*nodes[*a].value),
                Op::Tanh(a) => {
                    let d = out.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::Relu(a) => {
                    let d = nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::Max(a, b) | Op::Min(a, b) => {
                    let is_max = matches!(node.op, Op::Max(..));
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let full = va.dim().max(vb.dim());
                    let va_b = va.broadcast(full).expect("broadcast");
                    let vb_b = vb.broadcast(full).expect("broadcast");
                    let mut ga = Tensor::zeros(g.dim());
                    let mut gb = Tensor::zeros(g.dim());
                    ndarray::Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(&g)
                        .and(&va_b)
                        .and(&vb_b)
                        .for_each(|ga, gb, &g, &x, &y| {
                            let left = if is_max { x >= y } else { x <= y };
                            if left {
                                *ga = g;
                            } else {
                                *gb = g;
                            }
                        });
                    accumulate(&mut grads, *a, reduce_to(ga, shapes[*a]));
                    accumulate(&mut grads, *b, reduce_to(gb, shapes[*b]));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, g.dot(&vb.t()));
                    }
                    if nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, va.t().dot(&g));
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, standard(g.t().to_owned())),
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    accumulate(&mut grads, *a, Tensor::from_elem(shapes[*a], s));
                }
                Op::SumRows(a) => {
                    let full = g.broadcast(shapes[*a]).expect("broadcast").to_owned();
                    accumulate(&mut grads, *a, full);
                }
                Op::SumCols(a) => {
                    let full = g.broadcast(shapes[*a]).expect("broadcast").to_owned();
                    accumulate(&mut grads, *a, full);
                }
                Op::Gather(a, idx) => {
                    accumulate(&mut grads, *a, scatter_add_rows(&g, idx, shapes[*a].0));
                }
                Op::ScatterAdd(a, idx) => {
                    accumulate(&mut grads, *a, gather_rows(&g, idx));
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = shapes[p].1;
                        if nodes[p].requires_grad {
                            let slice = g.slice(ndarray::s![.., start..start + w]).to_owned();
                            accumulate(&mut grads, p, slice);
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut full = Tensor::zeros(shapes[*a]);
                    full.slice_mut(ndarray::s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, full);
                }
                Op::Custom(inputs, op) => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&i| &*nodes[i].value).collect();
                    let gs = op.backward(&g, &values, out);
                    for (&i, gi) in inputs.iter().zip(gs) {
                        accumulate(&mut grads, i, gi);
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    /// Value of a `1 × 1` node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on a non-scalar node");
        v[[0, 0]]
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().mapv(f);
        self.tape.unary(self.id, out, op)
    }

    fn check_domain(self, node: Var<'t>, op: &'static str, bad: impl Fn(f64) -> bool) {
        let v = self.value();
        if let Some((index, &value)) = v.iter().enumerate().find(|(_, &x)| bad(x)) {
            self.tape.record_fault(AutodiffError::Domain {
                op,
                node: node.id,
                index,
                value,
            });
        }
    }

    pub fn sqrt(self) -> Var<'t> {
        let out = self.map(Op::Sqrt(self.id), f64::sqrt);
        self.check_domain(out, "sqrt", |x| x < 0.0);
        out
    }

    pub fn exp(self) -> Var<'t> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        let out = self.map(Op::Ln(self.id), f64::ln);
        self.check_domain(out, "ln", |x| x <= 0.0);
        out
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(Op::Tanh(self.id), tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.map(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn powi(self, k: i32) -> Var<'t> {
        let out = self.map(Op::Powi(self.id, k), |x| x.powi(k));
        if k < 0 {
            self.check_domain(out, "powi", |x| x == 0.0);
        }
        out
    }

    pub fn square(self) -> Var<'t> {
        self.powi(2)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.map(Op::Offset(self.id), |x| x + c)
    }

    pub fn max(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let full = a.dim().max(b.dim());
        let mut out = a.broadcast(full).expect("broadcast").to_owned();
        ndarray::Zip::from(&mut out)
            .and(&b.broadcast(full).expect("broadcast"))
            .for_each(|x, &y| *x = if *x >= y { *x } else { y });
        self.tape.binary(self.id, other.id, out, Op::Max(self.id, other.id))
    }

    pub fn min(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let full = a.dim().max(b.dim());
        let mut out = a.broadcast(full).expect("broadcast").to_owned();
        ndarray::Zip::from(&mut out)
            .and(&b.broadcast(full).expect("broadcast"))
            .for_each(|x, &y| *x = if *x <= y { *x } else { y });
        self.tape.binary(self.id, other.id, out, Op::Min(self.id, other.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().dot(&*other.value());
        self.tape.binary(self.id, other.id, out, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let out = self.value().t().to_owned();
        self.tape.unary(self.id, out, Op::Transpose(self.id))
    }

    /// Sum of all elements, `1 × 1`.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.unary(self.id, Tensor::from_elem((1, 1), s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums, `1 × c`.
    pub fn sum_rows(self) -> Var<'t> {
        let out = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.unary(self.id, out, Op::SumRows(self.id))
    }

    /// Row sums, `r × 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let out = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.unary(self.id, out, Op::SumCols(self.id))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let out = gather_rows(&self.value(), idx);
        self.tape.unary(self.id, out, Op::Gather(self.id, idx.to_vec()))
    }

    /// `out[idx[r]] += self[r]` into a fresh `rows × c` tensor.
    pub fn scatter_add_rows(self, idx: &[usize], rows: usize) -> Var<'t> {
        let out = scatter_add_rows(&self.value(), idx, rows);
        self.tape.unary(self.id, out, Op::ScatterAdd(self.id, idx.to_vec()))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let out = self.value().slice(ndarray::s![.., start..end]).to_owned();
        self.tape.unary(self.id, out, Op::SliceCols(self.id, start))
    }

    /// Single column `k` as `r × 1`.
    pub fn col(self, k: usize) -> Var<'t> {
        self.slice_cols(k, k + 1)
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        (self * other).sum()
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $op:ident, $sym:tt, $check:expr) => {
        impl<'t> $trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let out = &*self.value() $sym &*rhs.value();
                let node = self.tape.binary(self.id, rhs.id, out, Op::$op(self.id, rhs.id));
                let check: Option<(&'static str, fn(f64) -> bool)> = $check;
                if let Some((name, bad)) = check {
                    rhs.check_domain(node, name, bad);
                }
                node
            }
        }
    };
}

binary_op!(Add, add, Add, +, None);
binary_op!(Sub, sub, Sub, -, None);
binary_op!(Mul, mul, Mul, *, None);
binary_op!(Div, div, Div, /, Some(("div", |x| x == 0.0)));

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.offset(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.offset(-rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        if rhs == 0.0 {
            let node = self.scale(f64::INFINITY);
            self.tape.record_fault(AutodiffError::Domain {
                op: "div",
                node: node.id,
                index: 0,
                value: 0.0,
            });
            return node;
        }
        self.scale(1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs.offset(self)
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        (-rhs).offset(self)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(self)
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        rhs.tape.scalar(self) / rhs
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.map(Op::Neg(self.id), |x| -x)
    }
}

/// Evaluates `program` on fresh leaves holding `inputs` and returns the
/// scalar value with one gradient per input.
pub fn gradient<F>(inputs: &[Tensor], program: F) -> Result<(f64, Vec<Tensor>), AutodiffError>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = program(&tape, &vars);
    let grads = tape.backward(out)?;
    let value = out.item();
    Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
}
