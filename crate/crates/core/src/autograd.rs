//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive records its output on a [`Tape`]. The adjoint of each
//! primitive is itself written with tape primitives, so a backward pass run
//! with `create_graph = true` leaves behind an ordinary differentiable graph:
//! gradients can be differentiated again. That is what lets an unrolled inner
//! gradient-descent loop be trained end to end.
//!
//! ```
//! use srn_core::autograd::Tape;
//! use srn_core::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss, &[x], false).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Real, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    SumTo(Var),
    SumAxis(Var),
    MatMul(Var, Var),
    Gather { x: Var, axis: usize, index: Arc<Vec<usize>> },
    ScatterAdd { x: Var, axis: usize, index: Arc<Vec<usize>> },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { y: Var, w: Var, geom: ConvGeom },
    ConvWeightGrad { x: Var, gy: Var, geom: ConvGeom },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Pow(..) => "pow",
            Op::Exp(..) => "exp",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::SumTo(..) => "sum_to",
            Op::SumAxis(..) => "sum_axis",
            Op::MatMul(..) => "matmul",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Pow(a, _)
            | Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::BroadcastTo(a)
            | Op::SumTo(a)
            | Op::SumAxis(a) => vec![a],
            Op::Gather { x, .. } | Op::ScatterAdd { x, .. } => vec![x],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::ConvTranspose2d { y, w, .. } => vec![y, w],
            Op::ConvWeightGrad { x, gy, .. } => vec![x, gy],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by the variables they were requested for.
#[derive(Debug, Clone)]
pub struct GradTable<T> {
    order: Vec<Var>,
    values: HashMap<Var, Tensor<T>>,
    nodes: HashMap<Var, Var>,
}

impl<T: Real> GradTable<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.values.get(&v)
    }

    /// Graph node holding the gradient; present only for `create_graph` passes.
    pub fn node(&self, v: Var) -> Option<Var> {
        self.nodes.get(&v).copied()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> + '_ {
        self.order.iter().map(move |v| (*v, &self.values[v]))
    }
}

/// Ordered record of primitive operations.
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grad_enabled: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Sets whether new operations record their inputs; returns the old value.
    pub fn set_grad_enabled(&mut self, enabled: bool) -> bool {
        std::mem::replace(&mut self.grad_enabled, enabled)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Graph(format!("variable #{} is not on this tape", v.idx)));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let parents = op.parents();
        if cfg!(debug_assertions)
            && !parents.is_empty()
            && !value.is_finite()
            && parents.iter().all(|p| self.nodes[p.index()].value.is_finite())
        {
            panic!("{} produced a non-finite value from finite inputs", op.name());
        }
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => self.grad_enabled && parents.iter().any(|p| self.nodes[p.index()].requires_grad),
        };
        let op = if requires_grad { op } else { Op::Constant };
        let idx = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, idx }
    }

    /// A differentiable input (parameter or differentiable data).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Copies the current value of `v` into a fresh constant.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        self.check(v)?;
        let value = self.value(v).clone();
        Ok(self.constant(value))
    }

    fn unary(&mut self, a: Var) -> Result<&Tensor<T>> {
        self.check(a)?;
        Ok(self.value(a))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self
            .value(a)
            .zip_broadcast(self.value(b), f)
            .map_err(|e| Error::Shape(format!("{}: {}", name, e)))?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::from_f64_lossy(c);
        let value = self.unary(a)?.map(|x| x * k);
        Ok(self.push(value, Op::Scale(a, c)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::from_f64_lossy(c);
        let value = self.unary(a)?.map(|x| x + k);
        Ok(self.push(value, Op::AddScalar(a)))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let k = T::from_f64_lossy(p);
        let value = self.unary(a)?.map(|x| x.powf(k));
        Ok(self.push(value, Op::Pow(a, p)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.unary(a)?.map(|x| x.exp());
        Ok(self.push(value, Op::Exp(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.unary(a)?.map(sigmoid_scalar);
        Ok(self.push(value, Op::Sigmoid(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.unary(a)?.map(|x| if x > T::zero() { x } else { T::zero() });
        Ok(self.push(value, Op::Relu(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.unary(a)?.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.unary(a)?.permute(perm)?;
        Ok(self.push(value, Op::Permute(a, perm.to_vec())))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.unary(a)?.shape() == shape {
            return Ok(a);
        }
        let value = self.value(a).broadcast_to(shape)?;
        Ok(self.push(value, Op::BroadcastTo(a)))
    }

    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.unary(a)?.shape() == shape {
            return Ok(a);
        }
        let value = self.value(a).sum_to(shape)?;
        Ok(self.push(value, Op::SumTo(a)))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = self.unary(a)?.sum_to(&[])?;
        Ok(self.push(value, Op::SumTo(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.unary(a)?.numel();
        if n == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, keeping it with extent 1. `canonical` makes the
    /// reduction independent of the order of entries along the axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize, canonical: bool) -> Result<Var> {
        let value = self.unary(a)?.sum_axis(axis, canonical)?;
        Ok(self.push(value, Op::SumAxis(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn gather(&mut self, a: Var, axis: usize, index: Arc<Vec<usize>>, index_shape: &[usize]) -> Result<Var> {
        let value = self.unary(a)?.gather(axis, &index, index_shape)?;
        Ok(self.push(value, Op::Gather { x: a, axis, index }))
    }

    pub fn scatter_add(&mut self, a: Var, axis: usize, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let value = self.unary(a)?.scatter_add(axis, &index, out_shape)?;
        Ok(self.push(value, Op::ScatterAdd { x: a, axis, index }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let value = tensor::conv2d(self.value(x), self.value(w), geom)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }))
    }

    /// Transposed convolution with an explicit output size.
    pub fn conv_transpose2d_sized(&mut self, y: Var, w: Var, geom: ConvGeom, out_hw: (usize, usize)) -> Result<Var> {
        self.check(y)?;
        self.check(w)?;
        let value = tensor::conv_transpose2d(self.value(y), self.value(w), geom, out_hw)?;
        Ok(self.push(value, Op::ConvTranspose2d { y, w, geom }))
    }

    /// Transposed convolution producing `(in - 1) * stride + k - 2 * padding`.
    pub fn conv_transpose2d(&mut self, y: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        self.check(y)?;
        self.check(w)?;
        let (ys, ws) = (self.shape(y), self.shape(w));
        if ys.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv_transpose2d: expected 4-d tensors, got {:?} and {:?}", ys, ws)));
        }
        let k = ws[2];
        let (h, wd) = match (geom.transposed_len(ys[2], k), geom.transposed_len(ys[3], k)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv_transpose2d: padding {} too large for input {:?} and kernel {}",
                    geom.padding, ys, k
                )))
            }
        };
        self.conv_transpose2d_sized(y, w, geom, (h, wd))
    }

    pub fn conv2d_weight_grad(&mut self, x: Var, gy: Var, k: usize, geom: ConvGeom) -> Result<Var> {
        self.check(x)?;
        self.check(gy)?;
        let value = tensor::conv2d_weight_grad(self.value(x), self.value(gy), k, geom)?;
        Ok(self.push(value, Op::ConvWeightGrad { x, gy, geom }))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `wrt`.
    ///
    /// `wrt` may name any recorded value, not only leaves. Values the loss
    /// does not depend on get zero gradients. With `create_graph` the
    /// gradients stay on the tape as differentiable nodes (see
    /// [`GradTable::node`]); otherwise the adjoint computation is discarded
    /// from the tape once the tensors are extracted.
    pub fn backward(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<GradTable<T>> {
        self.check(loss)?;
        for &v in wrt {
            self.check(v)?;
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut order = Vec::with_capacity(wrt.len());
        for &v in wrt {
            if !order.contains(&v) {
                order.push(v);
            }
        }

        let end = loss.index() + 1;
        let start_len = self.nodes.len();
        // depends[i]: node i lies on a path from some wrt node.
        let mut depends = vec![false; end];
        for &v in &order {
            if v.index() < end {
                depends[v.index()] = true;
            }
        }
        for i in 0..end {
            if !depends[i] {
                depends[i] = self.nodes[i].op.parents().iter().any(|p| depends[p.index()]);
            }
        }

        let saved = self.set_grad_enabled(create_graph);
        let result = self.run_backward(loss, &depends, &order, create_graph);
        self.grad_enabled = saved;
        let table = result?;
        if !create_graph {
            self.nodes.truncate(start_len);
        }
        Ok(table)
    }

    fn run_backward(&mut self, loss: Var, depends: &[bool], order: &[Var], create_graph: bool) -> Result<GradTable<T>> {
        let end = loss.index() + 1;
        let mut grads: Vec<Option<Var>> = vec![None; end];
        if depends[loss.index()] {
            let seed = Tensor::ones(self.shape(loss));
            grads[loss.index()] = Some(self.constant(seed));
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let parents = op.parents();
            if parents.is_empty() {
                continue;
            }
            let needs: Vec<bool> = parents.iter().map(|p| depends[p.index()]).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let out = Var { tape: self.id, idx: i as u32 };
            let pgrads = self.vjp(&op, out, g, &needs)?;
            for (p, pg) in parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                let slot = &mut grads[p.index()];
                *slot = Some(match *slot {
                    None => pg,
                    Some(acc) => self.add(acc, pg)?,
                });
            }
        }

        let mut values = HashMap::new();
        let mut nodes = HashMap::new();
        for &v in order {
            let g = if v.index() < end { grads[v.index()] } else { None };
            let g = match g {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.shape(v));
                    self.constant(zeros)
                }
            };
            values.insert(v, self.value(g).clone());
            if create_graph {
                nodes.insert(v, g);
            }
        }
        Ok(GradTable { order: order.to_vec(), values, nodes })
    }

    /// Vector-Jacobian products of one primitive, recorded as tape ops.
    fn vjp(&mut self, op: &Op, out: Var, g: Var, needs: &[bool]) -> Result<Vec<Option<Var>>> {
        let shape_of = |t: &Self, v: Var| t.shape(v).to_vec();
        Ok(match *op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => {
                let ga = if needs[0] { Some(self.sum_to(g, &shape_of(self, a))?) } else { None };
                let gb = if needs[1] { Some(self.sum_to(g, &shape_of(self, b))?) } else { None };
                vec![ga, gb]
            }
            Op::Sub(a, b) => {
                let ga = if needs[0] { Some(self.sum_to(g, &shape_of(self, a))?) } else { None };
                let gb = if needs[1] {
                    let n = self.neg(g)?;
                    Some(self.sum_to(n, &shape_of(self, b))?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Mul(a, b) => {
                let ga = if needs[0] {
                    let t = self.mul(g, b)?;
                    Some(self.sum_to(t, &shape_of(self, a))?)
                } else {
                    None
                };
                let gb = if needs[1] {
                    let t = self.mul(g, a)?;
                    Some(self.sum_to(t, &shape_of(self, b))?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Div(a, b) => {
                let ga = if needs[0] {
                    let t = self.div(g, b)?;
                    Some(self.sum_to(t, &shape_of(self, a))?)
                } else {
                    None
                };
                let gb = if needs[1] {
                    let t = self.mul(g, out)?;
                    let t = self.div(t, b)?;
                    let t = self.neg(t)?;
                    Some(self.sum_to(t, &shape_of(self, b))?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Scale(_, c) => vec![Some(self.scale(g, c)?)],
            Op::AddScalar(..) => vec![Some(g)],
            Op::Pow(a, p) => {
                let d = self.pow(a, p - 1.0)?;
                let d = self.scale(d, p)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Exp(_) => vec![Some(self.mul(g, out)?)],
            Op::Sigmoid(_) => {
                let one_minus = self.scale(out, -1.0)?;
                let one_minus = self.add_scalar(one_minus, 1.0)?;
                let d = self.mul(out, one_minus)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Relu(a) => {
                // The mask is a constant: the second derivative of relu is 0.
                let mask = self.value(a).map(|x| if x > T::zero() { T::one() } else { T::zero() });
                let mask = self.constant(mask);
                vec![Some(self.mul(g, mask)?)]
            }
            Op::Reshape(a) => {
                let s = shape_of(self, a);
                vec![Some(self.reshape(g, &s)?)]
            }
            Op::Permute(_, ref perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(self.permute(g, &inv)?)]
            }
            Op::BroadcastTo(a) => {
                let s = shape_of(self, a);
                vec![Some(self.sum_to(g, &s)?)]
            }
            Op::SumTo(a) | Op::SumAxis(a) => {
                let s = shape_of(self, a);
                let g = if self.shape(g).is_empty() && !s.is_empty() {
                    self.reshape(g, &vec![1; s.len()])?
                } else {
                    g
                };
                vec![Some(self.broadcast_to(g, &s)?)]
            }
            Op::MatMul(a, b) => {
                let ga = if needs[0] {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                };
                let gb = if needs[1] {
                    let at = self.transpose(a)?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Gather { x, axis, ref index } => {
                let s = shape_of(self, x);
                vec![Some(self.scatter_add(g, axis, index.clone(), &s)?)]
            }
            Op::ScatterAdd { x, axis, ref index } => {
                let s = shape_of(self, x);
                vec![Some(self.gather(g, axis, index.clone(), &s)?)]
            }
            Op::Conv2d { x, w, geom } => {
                let xs = shape_of(self, x);
                let k = self.shape(w)[2];
                let gx = if needs[0] { Some(self.conv_transpose2d_sized(g, w, geom, (xs[2], xs[3]))?) } else { None };
                let gw = if needs[1] { Some(self.conv2d_weight_grad(x, g, k, geom)?) } else { None };
                vec![gx, gw]
            }
            Op::ConvTranspose2d { y, w, geom } => {
                let k = self.shape(w)[2];
                let gy = if needs[0] { Some(self.conv2d(g, w, geom)?) } else { None };
                let gw = if needs[1] { Some(self.conv2d_weight_grad(g, y, k, geom)?) } else { None };
                vec![gy, gw]
            }
            Op::ConvWeightGrad { x, gy, geom } => {
                // <wgrad(x, gy), h> = <conv2d(x, h), gy>
                let xs = shape_of(self, x);
                let gx = if needs[0] { Some(self.conv_transpose2d_sized(gy, g, geom, (xs[2], xs[3]))?) } else { None };
                let ggy = if needs[1] { Some(self.conv2d(x, g, geom)?) } else { None };
                vec![gx, ggy]
            }
        })
    }
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.leaf(Tensor::from_vec(v.to_vec()))
    }

    #[test]
    fn add_and_identity_cases() {
        let mut t = Tape::<f64>::new();
        let a = vec_leaf(&mut t, &[1.0, 2.0]);
        let b = vec_leaf(&mut t, &[3.0, 4.0]);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);

        let x = vec_leaf(&mut t, &[0.5, -1.5, 2.0]);
        let ones = t.constant(Tensor::ones(&[3]));
        let y = t.mul(x, ones).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let a = t.leaf(Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5));
        let eye = t.constant(Tensor::eye(3));
        let p = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(p), t.value(a));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::<f64>::new();
        let a = vec_leaf(&mut t, &[1.0, 2.0]);
        let b = vec_leaf(&mut t, &[1.0, 2.0, 3.0]);
        let msg = t.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::<f64>::new();
        let x = vec_leaf(&mut t, &[1.0, -2.0, 3.0]);
        let sq = t.square(x).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.backward(l, &[x], false).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut t = Tape::<f64>::new();
        let x = vec_leaf(&mut t, &[-1.0, 0.5]);
        let r = t.relu(x).unwrap();
        let l = t.sum(r).unwrap();
        let g = t.backward(l, &[x], false).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut t = Tape::<f64>::new();
        let x = vec_leaf(&mut t, &[2.0]);
        let x2 = t.mul(x, x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let y = t.sum(x3).unwrap();
        let g1 = t.backward(y, &[x], true).unwrap();
        assert_eq!(g1.get(x).unwrap().data(), &[12.0]);
        let gx = g1.node(x).unwrap();
        let s = t.sum(gx).unwrap();
        let g2 = t.backward(s, &[x], false).unwrap();
        assert_eq!(g2.get(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn non_scalar_loss_and_foreign_vars_are_errors() {
        let mut t = Tape::<f64>::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0]);
        assert!(t.backward(x, &[x], false).unwrap_err().to_string().contains("scalar"));
        let mut other = Tape::<f64>::new();
        let y = vec_leaf(&mut other, &[1.0]);
        let l = t.sum(x).unwrap();
        assert!(t.backward(l, &[y], false).unwrap_err().to_string().contains("not on this tape"));
    }

    #[test]
    fn unreachable_wrt_gets_zeros_and_tape_is_restored() {
        let mut t = Tape::<f64>::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0]);
        let u = vec_leaf(&mut t, &[5.0]);
        let l = t.sum(x).unwrap();
        let before = t.len();
        let g = t.backward(l, &[x, u, x], false).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(u).unwrap().data(), &[0.0]);
        assert_eq!(t.len(), before);
    }

    #[test]
    fn grad_wrt_intermediate_value() {
        let mut t = Tape::<f64>::new();
        let x = vec_leaf(&mut t, &[3.0]);
        let y = t.scale(x, 2.0).unwrap();
        let z = t.square(y).unwrap();
        let l = t.sum(z).unwrap();
        let g = t.backward(l, &[y], false).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[12.0]);
    }

    #[test]
    fn constants_do_not_record() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::from_vec(vec![1.0]));
        let d = t.scale(c, 3.0).unwrap();
        assert!(!t.requires_grad(d));
        let prev = t.set_grad_enabled(false);
        let x = vec_leaf(&mut t, &[1.0]);
        let y = t.scale(x, 3.0).unwrap();
        assert!(!t.requires_grad(y));
        t.set_grad_enabled(prev);
    }
}
