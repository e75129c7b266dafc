//! A small tape-based reverse-mode differentiator.
//!
//! A [`Graph`] records every operation applied during one forward pass. Each
//! node keeps its output value; [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients into the [`ParamStore`] for every parameter the
//! loss depends on. Graphs are built fresh for each step and dropped after.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv1dSpec {
    pub fn output_len(&self, input_len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input_len + 2 * self.padding;
        if padded < span {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    SqrtFloor(Var, f64),
    ExpandInner(Var, usize),
    Tile(Var, usize),
    SumInner(Var, usize),
    SoftmaxInner(Var, usize),
    LogSoftmaxInner(Var, usize),
    Sum(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        spec: Conv1dSpec,
    },
    Normalize {
        x: Var,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a train-mode normalisation, to be folded
/// into running averages once the step is committed.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub(crate) fn push_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked; used by tests to differentiate with
    /// respect to inputs.
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the
    /// same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// `sqrt(max(x, floor))`.
    pub fn sqrt_floor(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor).sqrt());
        let ng = self.ng(a);
        self.push(value, Op::SqrtFloor(a, floor), ng)
    }

    /// Repeats every element `inner` times, appending a trailing axis.
    pub fn expand_inner(&mut self, a: Var, inner: usize) -> Var {
        let x = self.value(a);
        let mut shape = x.shape().to_vec();
        shape.push(inner);
        let mut data = Vec::with_capacity(x.len() * inner);
        for &v in x.data() {
            data.extend(std::iter::repeat(v).take(inner));
        }
        let value = Tensor::from_vec(&shape, data);
        let ng = self.ng(a);
        self.push(value, Op::ExpandInner(a, inner), ng)
    }

    /// Stacks `times` copies of the tensor along a new leading axis.
    pub fn tile(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(x.shape());
        let mut data = Vec::with_capacity(x.len() * times);
        for _ in 0..times {
            data.extend_from_slice(x.data());
        }
        let value = Tensor::from_vec(&shape, data);
        let ng = self.ng(a);
        self.push(value, Op::Tile(a, times), ng)
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let inner = *x.shape().last().expect("sum_last on scalar");
        let shape = &x.shape()[..x.rank() - 1];
        let data = x.data().chunks(inner).map(|c| c.iter().sum()).collect();
        let value = Tensor::from_vec(shape, data);
        let ng = self.ng(a);
        self.push(value, Op::SumInner(a, inner), ng)
    }

    pub fn mean_last(&mut self, a: Var) -> Var {
        let inner = *self.shape(a).last().expect("mean_last on scalar");
        let s = self.sum_last(a);
        self.scale(s, 1.0 / inner as f64)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let inner = *x.shape().last().expect("softmax on scalar");
        let mut data = x.data().to_vec();
        for block in data.chunks_mut(inner) {
            let m = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in block.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in block.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::from_vec(x.shape(), data);
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxInner(a, inner), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let inner = *x.shape().last().expect("log_softmax on scalar");
        let mut data = x.data().to_vec();
        for block in data.chunks_mut(inner) {
            let m = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + block.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in block.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::from_vec(x.shape(), data);
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxInner(a, inner), ng)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            shape[axis] += s[axis];
        }
        let (outer, _, _) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let x = self.value(p);
                let (_, len, inner) = split_axis(x.shape(), axis);
                let w = len * inner;
                data.extend_from_slice(&x.data()[o * w..(o + 1) * w]);
            }
        }
        let value = Tensor::from_vec(&shape, data);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::Concat(parts.to_vec(), axis), ng)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        assert!(start + len <= n, "narrow out of range");
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let value = Tensor::from_vec(&shape, data);
        let ng = self.ng(a);
        self.push(value, Op::Narrow { x: a, axis, start }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.rank(), 2);
        let w = x.dim(1);
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::from_vec(&[indices.len(), w], data);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, indices.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    /// 1D convolution of a `[cin, batch, time]` map with a `[cout, cin, k]`
    /// kernel. Zero padding is applied per utterance, never across the batch.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: Conv1dSpec) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv1d input must be [cin, batch, time]");
        assert_eq!(ws.len(), 3, "conv1d kernel must be [cout, cin, k]");
        let (cin, batch, t_in) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(cin, wcin, "conv1d channel mismatch");
        let t_out = spec
            .output_len(t_in, k)
            .expect("conv1d input shorter than receptive field");
        let n = batch * t_out;
        let mut out = Tensor::zeros(&[cout, batch, t_out]);
        let xv = self.value(x);
        let wv = self.value(w);
        if is_pointwise(k, spec) {
            gemm(
                cout,
                cin,
                n,
                1.0,
                MatRef::row_major(wv.data(), cin),
                MatRef::row_major(xv.data(), n),
                0.0,
                out.data_mut(),
                n,
            );
        } else {
            let cols = im2col(xv.data(), cin, batch, t_in, k, spec, t_out);
            gemm(
                cout,
                cin * k,
                n,
                1.0,
                MatRef::row_major(wv.data(), cin * k),
                MatRef::row_major(&cols, n),
                0.0,
                out.data_mut(),
                n,
            );
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::Conv1d { x, w, spec }, ng)
    }

    /// Per-channel normalisation of a `[channels, ...]` tensor.
    ///
    /// With `batch_stats` the mean and variance are taken over every
    /// trailing element of each channel and the gradient flows through the
    /// statistics; otherwise the given `mean`/`var` are constants. Returns
    /// the normalised tensor plus the (biased) batch mean and variance used.
    pub fn normalize(
        &mut self,
        x: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let c = xv.dim(0);
        let inner = xv.len() / c;
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (ch, block) in xv.data().chunks(inner).enumerate() {
                    let m = block.iter().sum::<f64>() / inner as f64;
                    let v = block.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / inner as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = xv.data().to_vec();
        for (ch, block) in data.chunks_mut(inner).enumerate() {
            for v in block.iter_mut() {
                *v = (*v - mean[ch]) * inv_std[ch];
            }
        }
        let value = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(x);
        let out = self.push(
            value,
            Op::Normalize {
                x,
                inv_std,
                batch_stats,
            },
            ng,
        );
        (out, mean, var)
    }

    /// Runs reverse-mode differentiation from the scalar `loss` and returns
    /// the gradient of every node that needed one.
    pub fn gradients(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut kept: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                kept[idx] = Some(g);
            }
        }
        Gradients { grads: kept }
    }

    /// Backpropagates `loss` and adds parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) {
        let grads = self.gradients(loss);
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[idx] {
                    store.get_mut(id).grad.add_assign(g);
                }
            }
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(g.data(), n),
                        MatRef::transposed(bv.data(), n),
                        0.0,
                        ga.data_mut(),
                        k,
                    );
                    accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(&[k, n]);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::transposed(av.data(), k),
                        MatRef::row_major(g.data(), n),
                        0.0,
                        gb.data_mut(),
                        n,
                    );
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.send(grads, *a, || elementwise(g, bv, |g, b| g * b));
                self.send(grads, *b, || elementwise(g, av, |g, a| g * a));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.send(grads, *a, || elementwise(g, bv, |g, b| g / b));
                self.send(grads, *b, || {
                    let t = elementwise(g, av, |g, a| g * a);
                    elementwise(&t, bv, |ga, b| -ga / (b * b))
                });
            }
            Op::Scale(a, s) => self.send(grads, *a, || g.map(|x| x * s)),
            Op::AddScalar(a) => self.send(grads, *a, || g.clone()),
            Op::Relu(a) => self.send(grads, *a, || {
                elementwise(g, y, |g, y| if y > 0.0 { g } else { 0.0 })
            }),
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                self.send(grads, *a, || {
                    elementwise(g, x, |g, x| if x > 0.0 { g } else { slope * g })
                })
            }
            Op::Sigmoid(a) => self.send(grads, *a, || elementwise(g, y, |g, y| g * y * (1.0 - y))),
            Op::Tanh(a) => self.send(grads, *a, || elementwise(g, y, |g, y| g * (1.0 - y * y))),
            Op::Square(a) => {
                let x = self.value(*a);
                self.send(grads, *a, || elementwise(g, x, |g, x| 2.0 * g * x))
            }
            Op::SqrtFloor(a, floor) => {
                let x = self.value(*a);
                self.send(grads, *a, || {
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(y.data())
                        .map(|((&g, &x), &y)| if x > *floor { 0.5 * g / y } else { 0.0 })
                        .collect();
                    Tensor::from_vec(x.shape(), data)
                })
            }
            Op::ExpandInner(a, inner) => self.send(grads, *a, || {
                let shape = self.value(*a).shape();
                let data = g.data().chunks(*inner).map(|c| c.iter().sum()).collect();
                Tensor::from_vec(shape, data)
            }),
            Op::Tile(a, times) => self.send(grads, *a, || {
                let x = self.value(*a);
                let n = x.len();
                let mut out = vec![0.0; n];
                for t in 0..*times {
                    for (o, v) in out.iter_mut().zip(&g.data()[t * n..(t + 1) * n]) {
                        *o += v;
                    }
                }
                Tensor::from_vec(x.shape(), out)
            }),
            Op::SumInner(a, inner) => self.send(grads, *a, || {
                let shape = self.value(*a).shape();
                let mut data = Vec::with_capacity(g.len() * inner);
                for &v in g.data() {
                    data.extend(std::iter::repeat(v).take(*inner));
                }
                Tensor::from_vec(shape, data)
            }),
            Op::SoftmaxInner(a, inner) => self.send(grads, *a, || {
                let mut data = vec![0.0; g.len()];
                for ((out, gb), yb) in data
                    .chunks_mut(*inner)
                    .zip(g.data().chunks(*inner))
                    .zip(y.data().chunks(*inner))
                {
                    let dot: f64 = gb.iter().zip(yb).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in out.iter_mut().zip(gb).zip(yb) {
                        *o = y * (g - dot);
                    }
                }
                Tensor::from_vec(y.shape(), data)
            }),
            Op::LogSoftmaxInner(a, inner) => self.send(grads, *a, || {
                let mut data = vec![0.0; g.len()];
                for ((out, gb), yb) in data
                    .chunks_mut(*inner)
                    .zip(g.data().chunks(*inner))
                    .zip(y.data().chunks(*inner))
                {
                    let total: f64 = gb.iter().sum();
                    for ((o, g), y) in out.iter_mut().zip(gb).zip(yb) {
                        *o = g - y.exp() * total;
                    }
                }
                Tensor::from_vec(y.shape(), data)
            }),
            Op::Sum(a) => {
                let s = g.item();
                self.send(grads, *a, || Tensor::full(self.value(*a).shape(), s))
            }
            Op::Concat(parts, axis) => {
                let (outer, _, _) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                let row = y.len() / outer;
                for &p in parts {
                    let xs = self.value(p).shape();
                    let (_, len, inner) = split_axis(xs, *axis);
                    let w = len * inner;
                    if self.ng(p) {
                        let mut data = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let base = o * row + offset;
                            data.extend_from_slice(&g.data()[base..base + w]);
                        }
                        accumulate(grads, p, Tensor::from_vec(xs, data));
                    }
                    offset += w;
                }
            }
            Op::Narrow { x, axis, start } => self.send(grads, *x, || {
                let xs = self.value(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = y.dim(*axis);
                let mut out = Tensor::zeros(xs);
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    out.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                out
            }),
            Op::Transpose(a) => self.send(grads, *a, || g.transpose()),
            Op::GatherRows(a, indices) => self.send(grads, *a, || {
                let xs = self.value(*a).shape();
                let w = xs[1];
                let mut out = Tensor::zeros(xs);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut out.data_mut()[i * w..(i + 1) * w];
                    for (d, s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                out
            }),
            Op::Reshape(a) => self.send(grads, *a, || g.clone().reshape(self.value(*a).shape())),
            Op::Conv1d { x, w, spec } => self.conv1d_backward(*x, *w, *spec, g, grads),
            Op::Normalize {
                x,
                inv_std,
                batch_stats,
            } => self.send(grads, *x, || {
                let c = y.dim(0);
                let inner = y.len() / c;
                let mut out = vec![0.0; y.len()];
                for ch in 0..c {
                    let range = ch * inner..(ch + 1) * inner;
                    let gb = &g.data()[range.clone()];
                    let yb = &y.data()[range.clone()];
                    let ob = &mut out[range];
                    if *batch_stats {
                        let n = inner as f64;
                        let sum_g: f64 = gb.iter().sum();
                        let sum_gy: f64 = gb.iter().zip(yb).map(|(g, y)| g * y).sum();
                        for ((o, g), y) in ob.iter_mut().zip(gb).zip(yb) {
                            *o = inv_std[ch] / n * (n * g - sum_g - y * sum_gy);
                        }
                    } else {
                        for (o, g) in ob.iter_mut().zip(gb) {
                            *o = g * inv_std[ch];
                        }
                    }
                }
                Tensor::from_vec(y.shape(), out)
            }),
        }
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.ng(v) {
            accumulate(grads, v, f());
        }
    }

    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        spec: Conv1dSpec,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (cin, batch, t_in) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (cout, k) = (wv.dim(0), wv.dim(2));
        let t_out = g.dim(2);
        let n = batch * t_out;
        let ck = cin * k;
        let pointwise = is_pointwise(k, spec);
        let cols_owned;
        let cols: &[f64] = if pointwise {
            xv.data()
        } else {
            cols_owned = im2col(xv.data(), cin, batch, t_in, k, spec, t_out);
            &cols_owned
        };
        if self.ng(w) {
            let mut gw = Tensor::zeros(wv.shape());
            gemm(
                cout,
                n,
                ck,
                1.0,
                MatRef::row_major(g.data(), n),
                MatRef::transposed(cols, n),
                0.0,
                gw.data_mut(),
                ck,
            );
            accumulate(grads, w, gw);
        }
        if self.ng(x) {
            let mut gcols = vec![0.0; ck * n];
            gemm(
                ck,
                cout,
                n,
                1.0,
                MatRef::transposed(wv.data(), ck),
                MatRef::row_major(g.data(), n),
                0.0,
                &mut gcols,
                n,
            );
            let gx = if pointwise {
                Tensor::from_vec(xv.shape(), gcols)
            } else {
                Tensor::from_vec(xv.shape(), col2im(&gcols, cin, batch, t_in, k, spec, t_out))
            };
            accumulate(grads, x, gx);
        }
    }
}

fn is_pointwise(k: usize, spec: Conv1dSpec) -> bool {
    k == 1 && spec.stride == 1 && spec.padding == 0
}

fn im2col(
    x: &[f64],
    cin: usize,
    batch: usize,
    t_in: usize,
    k: usize,
    spec: Conv1dSpec,
    t_out: usize,
) -> Vec<f64> {
    let n = batch * t_out;
    let mut cols = vec![0.0; cin * k * n];
    for c in 0..cin {
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * n..(c * k + kk + 1) * n];
            let shift = (kk * spec.dilation) as isize - spec.padding as isize;
            for b in 0..batch {
                let src = &x[(c * batch + b) * t_in..(c * batch + b + 1) * t_in];
                let dst = &mut row[b * t_out..(b + 1) * t_out];
                for (to, d) in dst.iter_mut().enumerate() {
                    let ti = (to * spec.stride) as isize + shift;
                    if ti >= 0 && (ti as usize) < t_in {
                        *d = src[ti as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &[f64],
    cin: usize,
    batch: usize,
    t_in: usize,
    k: usize,
    spec: Conv1dSpec,
    t_out: usize,
) -> Vec<f64> {
    let n = batch * t_out;
    let mut x = vec![0.0; cin * batch * t_in];
    for c in 0..cin {
        for kk in 0..k {
            let row = &cols[(c * k + kk) * n..(c * k + kk + 1) * n];
            let shift = (kk * spec.dilation) as isize - spec.padding as isize;
            for b in 0..batch {
                let dst = &mut x[(c * batch + b) * t_in..(c * batch + b + 1) * t_in];
                let src = &row[b * t_out..(b + 1) * t_out];
                for (to, s) in src.iter().enumerate() {
                    let ti = (to * spec.stride) as isize + shift;
                    if ti >= 0 && (ti as usize) < t_in {
                        dst[ti as usize] += s;
                    }
                }
            }
        }
    }
    x
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients of leaf and parameter nodes from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}
