//! Reverse-mode gradient tape.
//!
//! Every differentiable op appends a node holding its output value and enough
//! of its inputs to replay the adjoint. [`Tape::backward`] walks the nodes in
//! exact reverse execution order.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::ops::{self, PoolMode};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Kind of a recorded op. Used for cost accounting and the adjoint fault hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Pool2d,
    Resize,
    Add,
    Concat,
    Relu,
    Slice,
    Mul,
    Sum,
    Exp,
    Scale,
    Loss,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Pool2d => "pool2d",
            OpKind::Resize => "resize",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::Relu => "relu",
            OpKind::Slice => "slice",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::Exp => "exp",
            OpKind::Scale => "scale",
            OpKind::Loss => "loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            OpKind::Conv2d,
            OpKind::Pool2d,
            OpKind::Resize,
            OpKind::Add,
            OpKind::Concat,
            OpKind::Relu,
            OpKind::Slice,
            OpKind::Mul,
            OpKind::Sum,
            OpKind::Exp,
            OpKind::Scale,
            OpKind::Loss,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Pool2d {
        input: Var,
        factor: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Resize {
        input: Var,
    },
    Add(Var, Var),
    Concat(Vec<Var>),
    Relu(Var),
    Slice {
        input: Var,
        start: usize,
    },
    Mul(Var, Var),
    Sum(Var),
    /// `exp(clamp(x, -EXP_CLAMP, EXP_CLAMP))`
    Exp(Var),
    Scale(Var, T),
    /// Scalar-valued op whose input gradient was computed during the forward
    /// pass.
    Fused {
        input: Var,
        local_grad: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Pool2d { .. } => OpKind::Pool2d,
            Op::Resize { .. } => OpKind::Resize,
            Op::Add(..) => OpKind::Add,
            Op::Concat(_) => OpKind::Concat,
            Op::Relu(_) => OpKind::Relu,
            Op::Slice { .. } => OpKind::Slice,
            Op::Mul(..) => OpKind::Mul,
            Op::Sum(_) => OpKind::Sum,
            Op::Exp(_) => OpKind::Exp,
            Op::Scale(..) => OpKind::Scale,
            Op::Fused { .. } => OpKind::Loss,
        }
    }
}

/// Inputs beyond this magnitude saturate the exponential.
pub const EXP_CLAMP: f64 = 20.0;

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed ops plus the gradients of the last reverse sweep.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    bindings: Vec<(ParamId, Var)>,
    backward_done: bool,
    fault: Option<(OpKind, T)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
            backward_done: false,
            fault: None,
        }
    }

    /// Test hook: scales every adjoint emitted by ops of `kind` by `factor`.
    pub fn corrupt_adjoint(&mut self, kind: OpKind, factor: T) {
        self.fault = Some((kind, factor));
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite() || !self.all_inputs_finite(&op));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn all_inputs_finite(&self, op: &Op<T>) -> bool {
        let check = |v: &Var| self.nodes[v.0].value.is_finite();
        match op {
            Op::Leaf => true,
            Op::Conv2d { input, weight, bias, .. } => {
                check(input) && check(weight) && bias.as_ref().is_none_or(check)
            }
            Op::Pool2d { input, .. } | Op::Resize { input } | Op::Slice { input, .. } => check(input),
            Op::Add(a, b) | Op::Mul(a, b) => check(a) && check(b),
            Op::Concat(vs) => vs.iter().all(check),
            Op::Relu(a) | Op::Sum(a) | Op::Exp(a) | Op::Scale(a, _) => check(a),
            Op::Fused { input, .. } => check(input),
        }
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a parameter on the tape; its gradient can be pulled back into
    /// the store with [`ParamStore::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.get(id).value.clone(), Op::Leaf, true);
        self.bindings.push((id, v));
        v
    }

    pub fn param_bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bindings.iter().copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient from the last [`Tape::backward`]; `None` when the node was
    /// not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros for unreached nodes.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut vars = vec![input, weight];
        vars.extend(bias);
        let rg = self.tracked(&vars);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn pool2d(&mut self, input: Var, factor: usize, mode: PoolMode) -> Result<Var> {
        let (out, argmax) = ops::pool2d(self.value(input), factor, mode)?;
        let rg = self.tracked(&[input]);
        Ok(self.push(
            out,
            Op::Pool2d {
                input,
                factor,
                mode,
                argmax,
            },
            rg,
        ))
    }

    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            ops::upsample_bilinear(self.value(input), 1)?;
            return Ok(input);
        }
        let out = ops::upsample_bilinear(self.value(input), factor)?;
        let rg = self.tracked(&[input]);
        Ok(self.push(out, Op::Resize { input }, rg))
    }

    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(input), out_h, out_w)?;
        let rg = self.tracked(&[input]);
        Ok(self.push(out, Op::Resize { input }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&values)?;
        let rg = self.tracked(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).slice_channels(start, len)?;
        let rg = self.tracked(&[input]);
        Ok(self.push(out, Op::Slice { input, start }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.tracked(&[input]);
        self.push(out, Op::Relu(input), rg)
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.tracked(&[input]);
        self.push(out, Op::Sum(input), rg)
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let lim = T::lit(EXP_CLAMP);
        let out = self.value(input).map(|v| v.max(-lim).min(lim).exp());
        let rg = self.tracked(&[input]);
        self.push(out, Op::Exp(input), rg)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.tracked(&[input]);
        self.push(out, Op::Scale(input, factor), rg)
    }

    /// Records a scalar-valued op whose gradient with respect to `input` is
    /// already known (fused losses).
    pub fn fused_scalar(&mut self, input: Var, value: T, local_grad: Tensor<T>) -> Result<Var> {
        if local_grad.shape() != self.shape(input) {
            return Err(shape_err(
                "fused_scalar",
                format!("local gradient {} vs input {}", local_grad.shape(), self.shape(input)),
            ));
        }
        let rg = self.tracked(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::Fused { input, local_grad }, rg))
    }

    /// Clears gradients so [`Tape::backward`] may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autograd(
                "backward called twice without reset".into(),
            ));
        }
        if self.shape(loss).numel() != 1 {
            return Err(Error::Autograd(format!(
                "loss must be a scalar, got shape {}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(mut g) = self.grads[idx].take() else {
                continue;
            };
            let kind = self.nodes[idx].op.kind();
            if let Some((fault_kind, factor)) = self.fault {
                if fault_kind == kind {
                    g = g.map(|v| v * factor);
                }
            }
            let contributions = self.adjoint(idx, &g)?;
            self.grads[idx] = Some(g);
            for (v, contrib) in contributions {
                self.accumulate(v, contrib)?;
            }
        }
        Ok(())
    }

    fn adjoint(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (d_in, d_w, d_b) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *stride,
                    *padding,
                    rg(input),
                )?;
                let mut v = Vec::with_capacity(3);
                if let Some(d_in) = d_in {
                    v.push((*input, d_in));
                }
                v.push((*weight, d_w));
                if let Some(b) = bias {
                    let shaped = Tensor::from_vec(self.shape(*b), d_b.into_data())?;
                    v.push((*b, shaped));
                }
                v
            }
            Op::Pool2d {
                input,
                factor,
                mode,
                argmax,
            } => vec![(
                *input,
                ops::pool2d_backward(self.shape(*input), g, *factor, *mode, argmax),
            )],
            Op::Resize { input } => vec![(*input, ops::resize_bilinear_backward(self.shape(*input), g))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, ops::mul(g, self.value(*b))?),
                (*b, ops::mul(g, self.value(*a))?),
            ],
            Op::Concat(parts) => {
                let mut start = 0;
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let c = self.shape(*p).channels();
                    v.push((*p, g.slice_channels(start, c)?));
                    start += c;
                }
                v
            }
            Op::Slice { input, start } => {
                let in_shape = self.shape(*input);
                let len = g.shape().channels();
                let plane = in_shape.plane();
                let mut d = Tensor::zeros(in_shape);
                let nc = in_shape.channels();
                for b in 0..in_shape.batch() {
                    let dst = (b * nc + start) * plane;
                    d.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                }
                vec![(*input, d)]
            }
            Op::Relu(a) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::from_vec(g.shape(), data)?)]
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                vec![(*a, Tensor::full(self.shape(*a), gv))]
            }
            Op::Exp(a) => {
                let lim = T::lit(EXP_CLAMP);
                let data = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&x, &y), &gv)| if x.abs() < lim { gv * y } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::from_vec(g.shape(), data)?)]
            }
            Op::Scale(a, factor) => vec![(*a, g.map(|v| v * *factor))],
            Op::Fused { input, local_grad } => {
                let gv = g.item()?;
                vec![(*input, local_grad.map(|v| v * gv))]
            }
        };
        Ok(out)
    }

    /// Hash of every piecewise branch taken so far: ReLU input signs, max-pool
    /// winners and exponential saturation. Two evaluations with equal
    /// signatures lie on the same smooth piece (fused losses excepted).
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) => {
                    i.hash(&mut h);
                    for &v in self.nodes[a.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::Pool2d { mode: PoolMode::Max, argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Exp(a) => {
                    i.hash(&mut h);
                    let lim = T::lit(EXP_CLAMP);
                    for &v in self.nodes[a.0].value.data() {
                        (v.abs() >= lim).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Forward FLOPs of every recorded op except fused losses:
    /// convolutions count `2 · MACs + bias adds`; pooling, resampling and
    /// elementwise ops count one per output element; concat/slice are free.
    pub fn flops(&self) -> u64 {
        self.nodes.iter().map(|n| self.node_flops(n)).sum()
    }

    fn node_flops(&self, node: &Node<T>) -> u64 {
        let out = node.value.numel() as u64;
        match &node.op {
            Op::Conv2d { weight, bias, .. } => {
                let [_, cin, kh, kw] = self.shape(*weight).0;
                let macs = out * (cin * kh * kw) as u64;
                2 * macs + if bias.is_some() { out } else { 0 }
            }
            Op::Pool2d { factor: 1, .. } => 0,
            Op::Pool2d { .. }
            | Op::Resize { .. }
            | Op::Add(..)
            | Op::Mul(..)
            | Op::Relu(_)
            | Op::Exp(_)
            | Op::Scale(..) => out,
            Op::Sum(a) => self.shape(*a).numel() as u64,
            Op::Leaf | Op::Concat(_) | Op::Slice { .. } | Op::Fused { .. } => 0,
        }
    }

    /// Per-op `(kind, output shape, flops)` listing.
    pub fn cost_breakdown(&self) -> Vec<(OpKind, Shape, u64)> {
        self.nodes
            .iter()
            .map(|n| (n.op.kind(), n.value.shape(), self.node_flops(n)))
            .collect()
    }
}

/// Convenience: `sum(weights ⊙ x)` with constant `weights`.
pub fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, x: Var, weights: Tensor<T>) -> Result<Var> {
    if weights.shape() != tape.shape(x) {
        return Err(arg_err(
            "weighted_sum",
            format!("weights {} vs input {}", weights.shape(), tape.shape(x)),
        ));
    }
    let w = tape.constant(weights);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}
