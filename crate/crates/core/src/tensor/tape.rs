use super::kernels;
use super::ops::Ops;
use super::{Real, Tensor, TensorError};
use crate::dsp::{self, StftConfig};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT { x: Var, w: Var, b: Var },
    FreqLinear { x: Var, w: Var, b: Var },
    InstanceNorm { gamma: Var, beta: Var, x: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    Gelu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Concat { a: Var, b: Var },
    Reshape { x: Var },
    ResizeHw { x: Var },
    Istft { x: Var, cfg: StftConfig },
    SegmentMean { x: Var, seg: usize },
    WeightedSum { x: Var, weights: Tensor<T> },
    Sum { x: Var },
    Mean { x: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT { .. } => "conv_transpose2d",
            Op::FreqLinear { .. } => "freq_linear",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Gelu { .. } => "gelu",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat_channels",
            Op::Reshape { .. } => "reshape",
            Op::ResizeHw { .. } => "resize_hw",
            Op::Istft { .. } => "istft",
            Op::SegmentMean { .. } => "segment_mean",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvT { x, w, b } | Op::FreqLinear { x, w, b } => vec![x, w, b],
            Op::InstanceNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Concat { a, b } => vec![a, b],
            Op::Gelu { x }
            | Op::Scale { x, .. }
            | Op::Reshape { x }
            | Op::ResizeHw { x }
            | Op::Istft { x, .. }
            | Op::SegmentMean { x, .. }
            | Op::WeightedSum { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list recording every primitive for reverse-mode differentiation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    non_finite: Option<&'static str>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    /// Records an input; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        let requires_grad = requires_grad || op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
        }
        if let Some(op) = self.non_finite {
            return Err(TensorError::NonFinite(op));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(out.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(TensorError::NonFinite(self.nodes[i].op.name()));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.val(x), self.val(w), g, stride, pad, self.needs(x));
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                acc(w, dw);
                acc(b, db);
            }
            Op::ConvT { x, w, b } => {
                let (dx, dw, db) =
                    kernels::conv_transpose2d_backward(self.val(x), self.val(w), g, self.needs(x));
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                acc(w, dw);
                acc(b, db);
            }
            Op::FreqLinear { x, w, b } => {
                let (dx, dw, db) = kernels::freq_linear_backward(self.val(x), self.val(w), g, self.needs(x));
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                acc(w, dw);
                acc(b, db);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let (dx, dg, db) = kernels::instance_norm_backward(g, xhat, inv_std, self.val(gamma));
                acc(x, dx);
                acc(gamma, dg);
                acc(beta, db);
            }
            Op::Gelu { x } => {
                acc(x, kernels::zip_map(g, self.val(x), |d, v| d * kernels::gelu_grad(v)));
            }
            Op::Add { a, b } => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub { a, b } => {
                acc(a, g.clone());
                acc(b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    acc(a, kernels::zip_map(g, self.val(b), |d, v| d * v));
                }
                if self.needs(b) {
                    acc(b, kernels::zip_map(g, self.val(a), |d, v| d * v));
                }
            }
            Op::Scale { x, s } => acc(x, g.map(|v| v * s)),
            Op::Concat { a, b } => {
                let (ga, gb) = kernels::split_channels(g, self.val(a).shape()[1]);
                acc(a, ga);
                acc(b, gb);
            }
            Op::Reshape { x } => acc(x, g.clone().reshape(self.val(x).shape()).unwrap()),
            Op::ResizeHw { x } => {
                let s = self.val(x).shape();
                acc(x, kernels::resize_hw(g, s[2], s[3]));
            }
            Op::Istft { x, cfg } => acc(x, dsp::istft_planes_backward(g, &cfg, self.val(x).shape())),
            Op::SegmentMean { x, seg } => {
                acc(x, kernels::segment_mean_backward(g, self.val(x).shape(), seg));
            }
            Op::WeightedSum { x, ref weights } => {
                let d = g.data()[0];
                acc(x, weights.map(|w| w * d));
            }
            Op::Sum { x } => {
                let d = g.data()[0];
                acc(x, Tensor::full(self.val(x).shape(), d));
            }
            Op::Mean { x } => {
                let n = self.val(x).len();
                let d = g.data()[0] / T::from_f64_lossy(n as f64);
                acc(x, Tensor::full(self.val(x).shape(), d));
            }
        }
    }
}

impl<T: Real> Ops<T> for Tape<T> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.val(*v)
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Var {
        let y = kernels::conv2d_forward(self.val(*x), self.val(*w), self.val(*b), stride, pad);
        self.push(y, Op::Conv2d { x: *x, w: *w, b: *b, stride, pad }, false)
    }

    fn conv_transpose2d(&mut self, x: &Var, w: &Var, b: &Var) -> Var {
        let y = kernels::conv_transpose2d_forward(self.val(*x), self.val(*w), self.val(*b));
        self.push(y, Op::ConvT { x: *x, w: *w, b: *b }, false)
    }

    fn freq_linear(&mut self, x: &Var, w: &Var, b: &Var) -> Var {
        let y = kernels::freq_linear_forward(self.val(*x), self.val(*w), self.val(*b));
        self.push(y, Op::FreqLinear { x: *x, w: *w, b: *b }, false)
    }

    fn instance_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let out = kernels::instance_norm_forward(self.val(*x), self.val(*gamma), self.val(*beta), eps);
        let op = Op::InstanceNorm {
            x: *x,
            gamma: *gamma,
            beta: *beta,
            xhat: out.xhat,
            inv_std: out.inv_std,
        };
        self.push(out.y, op, false)
    }

    fn gelu(&mut self, x: &Var) -> Var {
        let y = self.val(*x).map(kernels::gelu);
        self.push(y, Op::Gelu { x: *x }, false)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let y = kernels::zip_map(self.val(*a), self.val(*b), |x, y| x + y);
        self.push(y, Op::Add { a: *a, b: *b }, false)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let y = kernels::zip_map(self.val(*a), self.val(*b), |x, y| x - y);
        self.push(y, Op::Sub { a: *a, b: *b }, false)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let y = kernels::zip_map(self.val(*a), self.val(*b), |x, y| x * y);
        self.push(y, Op::Mul { a: *a, b: *b }, false)
    }

    fn scale(&mut self, x: &Var, s: T) -> Var {
        let y = self.val(*x).map(|v| v * s);
        self.push(y, Op::Scale { x: *x, s }, false)
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Var {
        let y = kernels::concat_channels(self.val(*a), self.val(*b));
        self.push(y, Op::Concat { a: *a, b: *b }, false)
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Var {
        let y = self.val(*x).clone().reshape(shape).expect("reshape preserves element count");
        self.push(y, Op::Reshape { x: *x }, false)
    }

    fn resize_hw(&mut self, x: &Var, h: usize, w: usize) -> Var {
        let y = kernels::resize_hw(self.val(*x), h, w);
        self.push(y, Op::ResizeHw { x: *x }, false)
    }

    fn istft(&mut self, x: &Var, cfg: &StftConfig, length: usize) -> Var {
        let y = dsp::istft_planes(self.val(*x), cfg, length);
        self.push(y, Op::Istft { x: *x, cfg: *cfg }, false)
    }

    fn segment_mean(&mut self, x: &Var, seg: usize) -> Var {
        let y = kernels::segment_mean(self.val(*x), seg);
        self.push(y, Op::SegmentMean { x: *x, seg }, false)
    }

    fn weighted_sum(&mut self, x: &Var, weights: &Tensor<T>) -> Var {
        let y = super::Eager.weighted_sum(self.val(*x), weights);
        self.push(y, Op::WeightedSum { x: *x, weights: weights.clone() }, false)
    }

    fn sum(&mut self, x: &Var) -> Var {
        let y = Tensor::scalar(T::from_f64_lossy(self.val(*x).sum_f64()));
        self.push(y, Op::Sum { x: *x }, false)
    }

    fn mean(&mut self, x: &Var) -> Var {
        let v = self.val(*x);
        let y = Tensor::scalar(T::from_f64_lossy(v.sum_f64() / v.len() as f64));
        self.push(y, Op::Mean { x: *x }, false)
    }
}
