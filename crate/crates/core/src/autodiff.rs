//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every operation appends one node. A node keeps its output value and, when any input
//! requires a gradient, the information its backward rule needs. [`Tape::backward`]
//! walks the nodes in reverse recording order and accumulates gradients into every
//! node that requires one.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::loss::{self, EpeForm};
use crate::ops::{self, ConvSpec, DropoutKey, PoolSpec};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

enum Op<T> {
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var },
    Resize { x: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    Relu { x: Var },
    Mask { x: Var, mask: Vec<T> },
    Softmax { x: Var },
    Concat { inputs: Vec<Var> },
    Slice { x: Var, start: usize },
    AddScaled { a: Var, b: Var, alpha: T },
    WeightedSum { x: Var, weights: Option<Tensor<T>> },
    SpatialDiff { x: Var, axis: Axis },
    Nll { p: Var, target: Arc<Tensor<T>>, eps: T },
    Epe { u: Var, target: Arc<Tensor<T>>, eps: T, form: EpeForm },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::AvgPool { .. } => "adaptive_avg_pool2d",
            Op::Resize { .. } => "bilinear_resize",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batchnorm2d",
            Op::Relu { .. } => "relu",
            Op::Mask { .. } => "dropout",
            Op::Softmax { .. } => "softmax_channels",
            Op::Concat { .. } => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::AddScaled { .. } => "add",
            Op::WeightedSum { .. } => "sum",
            Op::SpatialDiff { .. } => "spatial_gradient",
            Op::Nll { .. } => "nll_loss",
            Op::Epe { .. } => "epe_loss",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Option<Op<T>>,
}

/// Summary of one backward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Recorded operations whose backward rule ran.
    pub ops_visited: usize,
    /// Operation names in visiting order.
    pub visited: Vec<&'static str>,
}

/// Single-threaded recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers a value without copying it.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then_some(op);
        self.nodes.push(Node { value: Arc::new(value), requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = ops::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, &inputs, Op::Conv2d { x, w, b, spec: *spec }))
    }

    pub fn maxpool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d_forward(self.value(x), spec)?;
        Ok(self.push(y, &[x], Op::MaxPool { x, argmax }))
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::adaptive_avg_pool2d_forward(self.value(x), out_h, out_w)?;
        Ok(self.push(y, &[x], Op::AvgPool { x }))
    }

    /// Bilinear resize to an explicit size (half-pixel centres).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::bilinear_resize_forward(self.value(x), out_h, out_w)?;
        Ok(self.push(y, &[x], Op::Resize { x }))
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("bilinear_upsample", "factor must be at least 1"));
        }
        let s = self.shape(x);
        self.bilinear_resize(x, s.h * factor, s.w * factor)
    }

    /// Training-mode batch normalization; returns the batch statistics for running-stat
    /// updates.
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, ops::BatchStats<T>)> {
        let (y, xhat, inv_std, stats) =
            ops::batchnorm_train_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let v = self.push(y, &[x, gamma, beta], Op::BatchNormTrain { x, gamma, beta, xhat, inv_std });
        Ok((v, stats))
    }

    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let xv = self.value(x);
        let y = ops::batchnorm_eval_forward(xv, self.value(gamma), self.value(beta), running_mean, running_var, eps)?;
        let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let s = xv.shape();
        let mut xhat = Vec::with_capacity(s.numel());
        for n in 0..s.n {
            for c in 0..s.c {
                let m = running_mean.data()[c];
                xhat.extend(xv.plane(n, c).iter().map(|&v| (v - m) * inv_std[c]));
            }
        }
        let xhat = Tensor::from_parts(s, xhat);
        Ok(self.push(y, &[x, gamma, beta], Op::BatchNormEval { x, gamma, beta, xhat, inv_std }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(self.value(x));
        self.push(y, &[x], Op::Relu { x })
    }

    /// Inverted dropout. In evaluation mode (`train == false`) returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, key: DropoutKey) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if !train {
            return Ok(x);
        }
        let xv = self.value(x);
        let mask = ops::dropout_mask::<T>(xv.shape(), p, key)?;
        let y = Tensor::from_parts(xv.shape(), xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect());
        Ok(self.push(y, &[x], Op::Mask { x, mask }))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_channels_forward(self.value(x))?;
        Ok(self.push(y, &[x], Op::Softmax { x }))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels_forward(&values)?;
        Ok(self.push(y, inputs, Op::Concat { inputs: inputs.to_vec() }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start, len)?;
        Ok(self.push(y, &[x], Op::Slice { x, start }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, T::one())
    }

    /// `a + alpha · b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, alpha: T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch { op: "add", lhs: av.shape(), rhs: bv.shape() });
        }
        let y = Tensor::from_parts(
            av.shape(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x + alpha * y).collect(),
        );
        Ok(self.push(y, &[a, b], Op::AddScaled { a, b, alpha }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, &[x], Op::WeightedSum { x, weights: None })
    }

    /// `Σ x ⊙ weights` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::ShapeMismatch { op: "weighted_sum", lhs: xv.shape(), rhs: weights.shape() });
        }
        let s = xv.data().iter().zip(weights.data()).fold(T::zero(), |a, (&x, &w)| a + x * w);
        Ok(self.push(Tensor::scalar(s), &[x], Op::WeightedSum { x, weights: Some(weights.clone()) }))
    }

    /// Forward difference along one spatial axis, zero at the last row/column.
    pub fn spatial_gradient(&mut self, x: Var, axis: Axis) -> Var {
        let y = loss::spatial_diff(self.value(x), axis);
        self.push(y, &[x], Op::SpatialDiff { x, axis })
    }

    pub(crate) fn nll(&mut self, p: Var, target: Arc<Tensor<T>>, eps: T) -> Result<Var> {
        let value = loss::nll_value(self.value(p), &target, eps)?;
        Ok(self.push(Tensor::scalar(value), &[p], Op::Nll { p, target, eps }))
    }

    pub(crate) fn epe(&mut self, u: Var, target: Arc<Tensor<T>>, eps: T, form: EpeForm) -> Result<Var> {
        let value = loss::epe_value(self.value(u), &target, eps, form)?;
        Ok(self.push(Tensor::scalar(value), &[u], Op::Epe { u, target, eps, form }))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), g.shape());
        match node.grad.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Back-propagates from a single-element output. Gradients of intermediate nodes are
    /// released once used; leaf gradients remain readable through [`Tape::grad`].
    pub fn backward(&mut self, output: Var) -> Result<BackwardStats> {
        if self.consumed {
            return Err(Error::invalid("backward", "tape was already differentiated"));
        }
        let out_shape = self.shape(output);
        if out_shape.numel() != 1 {
            return Err(Error::invalid("backward", format!("output must be scalar, got {out_shape}")));
        }
        self.consumed = true;
        let mut stats = BackwardStats::default();
        if !self.needs(output) {
            return Ok(stats);
        }
        self.nodes[output.0].grad = Some(Tensor::full(out_shape, T::one()));
        for i in (0..=output.0).rev() {
            let Some(op) = self.nodes[i].op.take() else { continue };
            let Some(g) = self.nodes[i].grad.take() else { continue };
            stats.ops_visited += 1;
            stats.visited.push(op.name());
            self.backward_op(i, op, g)?;
        }
        Ok(stats)
    }

    fn backward_op(&mut self, i: usize, op: Op<T>, g: Tensor<T>) -> Result<()> {
        match op {
            Op::Conv2d { x, w, b, spec } => {
                let need = (self.needs(x), self.needs(w), b.is_some_and(|b| self.needs(b)));
                let grads = ops::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    b.map(|b| self.value(b)),
                    &spec,
                    &g,
                    need,
                )?;
                if let Some(d) = grads.input {
                    self.accumulate(x, d);
                }
                if let Some(d) = grads.weight {
                    self.accumulate(w, d);
                }
                if let (Some(b), Some(d)) = (b, grads.bias) {
                    let shape = self.shape(b);
                    self.accumulate(b, d.reshape(shape)?);
                }
            }
            Op::MaxPool { x, argmax } => {
                let d = ops::maxpool2d_backward(self.shape(x), &argmax, &g);
                self.accumulate(x, d);
            }
            Op::AvgPool { x } => {
                let d = ops::adaptive_avg_pool2d_backward(self.shape(x), &g);
                self.accumulate(x, d);
            }
            Op::Resize { x } => {
                let d = ops::bilinear_resize_backward(self.shape(x), &g);
                self.accumulate(x, d);
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                if self.needs(x) {
                    let d = ops::batchnorm_train_backward_input(&g, &xhat, self.value(gamma), &inv_std);
                    self.accumulate(x, d);
                }
                self.batchnorm_affine_grads(gamma, beta, &g, &xhat)?;
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                if self.needs(x) {
                    let s = g.shape();
                    let gam = self.value(gamma).data().to_vec();
                    let mut d = Vec::with_capacity(s.numel());
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let k = gam[c] * inv_std[c];
                            d.extend(g.plane(n, c).iter().map(|&v| v * k));
                        }
                    }
                    self.accumulate(x, Tensor::from_parts(s, d));
                }
                self.batchnorm_affine_grads(gamma, beta, &g, &xhat)?;
            }
            Op::Relu { x } => {
                let d = ops::relu_backward(self.value(x), &g);
                self.accumulate(x, d);
            }
            Op::Mask { x, mask } => {
                let d = Tensor::from_parts(g.shape(), g.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect());
                self.accumulate(x, d);
            }
            Op::Softmax { x } => {
                let d = ops::softmax_channels_backward(&self.nodes[i].value, &g);
                self.accumulate(x, d);
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                for v in inputs {
                    let c = self.shape(v).c;
                    if self.needs(v) {
                        let d = g.slice_channels(start, c)?;
                        self.accumulate(v, d);
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let s = self.shape(x);
                let gs = g.shape();
                let mut d = vec![T::zero(); s.numel()];
                let p = s.plane();
                for n in 0..s.n {
                    let dst = (n * s.c + start) * p;
                    let src = n * gs.c * p;
                    d[dst..dst + gs.c * p].copy_from_slice(&g.data()[src..src + gs.c * p]);
                }
                self.accumulate(x, Tensor::from_parts(s, d));
            }
            Op::AddScaled { a, b, alpha } => {
                if self.needs(b) {
                    self.accumulate(b, g.map(|v| v * alpha));
                }
                self.accumulate(a, g);
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.item();
                let d = match weights {
                    Some(w) => w.map(|v| v * gv),
                    None => Tensor::full(self.shape(x), gv),
                };
                self.accumulate(x, d);
            }
            Op::SpatialDiff { x, axis } => {
                let d = loss::spatial_diff_adjoint(&g, axis);
                self.accumulate(x, d);
            }
            Op::Nll { p, target, eps } => {
                let d = loss::nll_grad(self.value(p), &target, eps, g.item());
                self.accumulate(p, d);
            }
            Op::Epe { u, target, eps, form } => {
                let d = loss::epe_grad(self.value(u), &target, eps, form, g.item());
                self.accumulate(u, d);
            }
        }
        Ok(())
    }

    fn batchnorm_affine_grads(&mut self, gamma: Var, beta: Var, g: &Tensor<T>, xhat: &Tensor<T>) -> Result<()> {
        if !(self.needs(gamma) || self.needs(beta)) {
            return Ok(());
        }
        let (sd, sdx) = ops::norm::channel_sums(g, xhat);
        let c = sd.len();
        let gs = self.shape(gamma);
        let bs = self.shape(beta);
        self.accumulate(gamma, Tensor::new(gs, sdx)?);
        self.accumulate(beta, Tensor::new(bs, sd)?);
        debug_assert_eq!(gs.numel(), c);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_gradient_is_exact() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([1, 2, 3, 3], |[_, c, h, w]| (c + h * w) as f64), true);
        let c = Tensor::full([1, 2, 3, 3], 2.5);
        let y = tape.weighted_sum(x, &c).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.5));
    }

    #[test]
    fn each_op_visited_once() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        let a = tape.relu(x);
        let b = tape.add(a, x).unwrap();
        let c = tape.add(b, a).unwrap();
        let s = tape.sum(c);
        let stats = tape.backward(s).unwrap();
        assert_eq!(stats.ops_visited, tape.len() - 1);
        assert_eq!(stats.visited, vec!["sum", "add", "add", "relu"]);
        // d/dx (relu(x) + x + relu(x)) = 3 for x > 0
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 3.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_record_nothing() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let y = tape.relu(x);
        assert!(!tape.requires_grad(y));
        assert_eq!(tape.recorded_ops(), 0);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([1, 2, 3, 3], 1.5), true);
        let y = tape.dropout(x, 0.5, false, DropoutKey { seed: 1, layer: 1, step: 1 }).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
}
