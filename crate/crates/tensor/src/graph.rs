//! Recording autodiff tape.
//!
//! Values live in an arena owned by the [`Graph`]; a [`Var`] is an index into
//! it. When recording is on, every op whose inputs need a gradient pushes a
//! node, and [`Graph::backward`] walks those nodes in reverse.

use std::time::Instant;

use crate::kernels::{self, norm, softmax, Conv2dParams};
use crate::profile::{OpKind, OpProfile};
use crate::{Element, Result, Shape, Tensor, TensorError};

/// Handle to a value inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<E: Element> {
    MatMul,
    Conv2d(Conv2dParams),
    Add,
    Mul,
    Scale(E),
    GradScale(E),
    Relu,
    Sigmoid,
    BatchNormTrain { eps: f64 },
    BatchNormInfer { eps: f64 },
    Softmax,
    Reshape(Vec<usize>),
    Transpose,
    Concat,
    Narrow { start: usize, len: usize },
    GlobalAvgPool,
    SumAll,
    CrossEntropy(Vec<usize>),
}

impl<E: Element> Op<E> {
    fn kind(&self) -> OpKind {
        match self {
            Op::MatMul => OpKind::MatMul,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::GradScale(_) => OpKind::GradScale,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::BatchNormTrain { .. } | Op::BatchNormInfer { .. } => OpKind::BatchNorm,
            Op::Softmax => OpKind::Softmax,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Transpose => OpKind::Transpose,
            Op::Concat => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Split,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::SumAll => OpKind::SumAll,
            Op::CrossEntropy(_) => OpKind::CrossEntropy,
        }
    }
}

// Intermediates kept for backward that are not already in the arena.
enum Saved<E: Element> {
    Nothing,
    BatchNorm(Box<norm::BatchNormTrain<E>>),
    Probs(Tensor<E>),
}

struct Node<E: Element> {
    op: Op<E>,
    inputs: Vec<Var>,
    output: Var,
    saved: Saved<E>,
}

fn evaluate<E: Element>(op: &Op<E>, x: &[&Tensor<E>]) -> Result<(Tensor<E>, Saved<E>)> {
    let plain = |t: Tensor<E>| Ok((t, Saved::Nothing));
    match op {
        Op::MatMul => plain(kernels::matmul(x[0], x[1])?),
        Op::Conv2d(p) => plain(kernels::conv2d(x[0], x[1], x.get(2).copied(), *p)?),
        Op::Add => plain(kernels::add(x[0], x[1])?),
        Op::Mul => plain(kernels::mul(x[0], x[1])?),
        Op::Scale(k) => plain(kernels::scale(x[0], *k)),
        Op::GradScale(_) => plain(x[0].reshape(x[0].dims().to_vec())?),
        Op::Relu => plain(kernels::relu(x[0])),
        Op::Sigmoid => plain(kernels::sigmoid(x[0])),
        Op::BatchNormTrain { eps } => {
            let bn = kernels::batchnorm_train(x[0], x[1], x[2], *eps)?;
            Ok((bn.output.clone(), Saved::BatchNorm(Box::new(bn))))
        }
        Op::BatchNormInfer { eps } => {
            plain(kernels::batchnorm_infer(x[0], x[1], x[2], x[3], x[4], *eps)?)
        }
        Op::Softmax => plain(kernels::softmax_lastdim(x[0])?),
        Op::Reshape(dims) => plain(x[0].reshape(dims.clone())?.with_requires_grad(false)),
        Op::Transpose => plain(kernels::transpose_last2(x[0])?),
        Op::Concat => plain(kernels::concat_channels(x)?),
        Op::Narrow { start, len } => plain(kernels::narrow_channels(x[0], *start, *len)?),
        Op::GlobalAvgPool => plain(kernels::global_avg_pool(x[0])?),
        Op::SumAll => plain(kernels::sum_all(x[0])),
        Op::CrossEntropy(labels) => {
            let (loss, probs) = kernels::cross_entropy(x[0], labels)?;
            Ok((loss, Saved::Probs(probs)))
        }
    }
}

/// Running statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct RunningUpdate<E: Element> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

/// How a batch norm normalises its input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Running statistics; output is an affine map of the input.
    Infer,
    /// Batch statistics, plus a running-stat update with this momentum.
    Train { momentum: f64 },
}

/// Handles for the four tensors of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnVars {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

pub struct Graph<E: Element = f32> {
    values: Vec<Tensor<E>>,
    produced: Vec<bool>,
    nodes: Vec<Node<E>>,
    recording: bool,
    check_finite: bool,
    profile: Option<OpProfile>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    /// A graph that records nodes for backward.
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            produced: Vec::new(),
            nodes: Vec::new(),
            recording: true,
            check_finite: true,
            profile: None,
        }
    }

    /// A graph that never records; `backward` on it is an error.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Turns the per-op non-finite check on or off (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Starts collecting per-op timings, discarding any earlier ones.
    pub fn enable_profiling(&mut self) {
        self.profile = Some(OpProfile::default());
    }

    pub fn profile(&self) -> Option<&OpProfile> {
        self.profile.as_ref()
    }

    pub fn take_profile(&mut self) -> Option<OpProfile> {
        self.profile.take()
    }

    /// Adds an input tensor. It takes part in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.values.push(t);
        self.produced.push(false);
        Var(self.values.len() - 1)
    }

    /// Adds a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.values[v.0]
    }

    /// Gradient accumulated on a leaf by [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.values[v.0].grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.values[v.0].requires_grad()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn apply(&mut self, op: Op<E>, inputs: Vec<Var>) -> Result<Var> {
        let kind = op.kind();
        let start = self.profile.is_some().then(Instant::now);
        let (out, saved) = {
            let refs: Vec<&Tensor<E>> = inputs.iter().map(|v| &self.values[v.0]).collect();
            evaluate(&op, &refs)?
        };
        if let (Some(t0), Some(p)) = (start, self.profile.as_mut()) {
            p.record(kind, t0.elapsed());
        }
        if self.check_finite {
            if let Some(index) = out.first_non_finite() {
                return Err(TensorError::NonFinite {
                    op: kind.name(),
                    index,
                });
            }
        }
        let needs_grad = self.recording && inputs.iter().any(|v| self.values[v.0].requires_grad());
        let output = Var(self.values.len());
        self.values.push(out.with_requires_grad(needs_grad));
        self.produced.push(true);
        if needs_grad {
            self.nodes.push(Node {
                op,
                inputs,
                output,
                saved,
            });
        }
        Ok(output)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, vec![a, b])
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.apply(Op::Conv2d(p), inputs)
    }

    /// Broadcasting sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, vec![a, b])
    }

    /// Broadcasting product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Op::Scale(E::from_f64(k)), vec![a])
    }

    /// Identity forward; multiplies the incoming gradient by `k` on the way back.
    pub fn grad_scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Op::GradScale(E::from_f64(k)), vec![a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, vec![a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, vec![a])
    }

    /// Batch norm over axis 1. Training mode also returns the updated running stats.
    pub fn batchnorm(
        &mut self,
        x: Var,
        bn: BnVars,
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<RunningUpdate<E>>)> {
        match mode {
            BnMode::Infer => {
                let inputs = vec![x, bn.gamma, bn.beta, bn.running_mean, bn.running_var];
                Ok((self.apply(Op::BatchNormInfer { eps }, inputs)?, None))
            }
            BnMode::Train { momentum } => {
                if !(0.0..=1.0).contains(&momentum) {
                    return Err(TensorError::param(
                        "batchnorm",
                        format!("momentum {momentum} outside [0, 1]"),
                    ));
                }
                let out = self.apply(Op::BatchNormTrain { eps }, vec![x, bn.gamma, bn.beta])?;
                let (rm, rv) = (self.value(bn.running_mean), self.value(bn.running_var));
                let update = match self.nodes.last() {
                    Some(Node {
                        output,
                        saved: Saved::BatchNorm(stats),
                        ..
                    }) if *output == out => {
                        let (mean, var) = stats.updated_running(rm, rv, momentum);
                        RunningUpdate { mean, var }
                    }
                    // Node not recorded: recompute the statistics directly.
                    _ => {
                        let (xv, gv, bv) = (self.value(x), self.value(bn.gamma), self.value(bn.beta));
                        let stats = kernels::batchnorm_train(xv, gv, bv, eps)?;
                        let (mean, var) = stats.updated_running(rm, rv, momentum);
                        RunningUpdate { mean, var }
                    }
                };
                Ok((out, Some(update)))
            }
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, vec![a])
    }

    pub fn reshape(&mut self, a: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Op::Reshape(dims.into()), vec![a])
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, vec![a])
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, parts.to_vec())
    }

    /// Channels `start..start + len` of axis 1.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Narrow { start, len }, vec![a])
    }

    /// Splits axis 1 into `parts` equal chunks.
    pub fn split(&mut self, a: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.value(a).dims().get(1).copied().unwrap_or(0);
        if parts == 0 || c % parts != 0 {
            return Err(TensorError::shape(
                "split",
                format!("{c} channels into {parts} parts"),
            ));
        }
        let len = c / parts;
        (0..parts).map(|i| self.narrow(a, i * len, len)).collect()
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::GlobalAvgPool, vec![a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumAll, vec![a])
    }

    /// Mean cross-entropy of `[B, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(Op::CrossEntropy(labels.to_vec()), vec![logits])
    }

    /// `x @ weightᵀ + bias` for `x: [B, In]`, `weight: [Out, In]`, `bias: [Out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let wt = self.transpose_last2(weight)?;
        let y = self.matmul(x, wt)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate into each leaf's grad slot.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(TensorError::State(
                "backward called on a graph built without recording".into(),
            ));
        }
        let lv = &self.values[loss.0];
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.dims()
            )));
        }
        if !lv.requires_grad() {
            return Err(TensorError::State(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().clone(), vec![E::one()]));

        for node in self.nodes.iter().rev() {
            let Some(g) = grads[node.output.0].take() else {
                continue;
            };
            let input_grads = self.vjp(node, &g)?;
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.values[inp.0].requires_grad() {
                    continue;
                }
                grads[inp.0] = Some(match grads[inp.0].take() {
                    Some(acc) => kernels::add(&acc, &ig)?,
                    None => ig,
                });
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if !self.produced[i] && self.values[i].requires_grad() {
                    self.values[i].accumulate_grad(&g)?;
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, node: &Node<E>, g: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        let val = |k: usize| &self.values[node.inputs[k].0];
        let need = |k: usize| val(k).requires_grad();
        let out = &self.values[node.output.0];
        Ok(match &node.op {
            Op::MatMul => {
                let (ga, gb) = kernels::matmul_backward(val(0), val(1), g, need(0), need(1))?;
                vec![ga, gb]
            }
            Op::Conv2d(p) => {
                let has_bias = node.inputs.len() == 3;
                let grads = kernels::conv2d_backward(
                    val(0),
                    val(1),
                    g,
                    *p,
                    [need(0), need(1), has_bias && need(2)],
                )?;
                let mut v = vec![grads.input, grads.weight];
                if has_bias {
                    v.push(grads.bias);
                }
                v
            }
            Op::Add => vec![
                Some(kernels::reduce_to_shape(g, val(0).shape())?),
                Some(kernels::reduce_to_shape(g, val(1).shape())?),
            ],
            Op::Mul => {
                let ga = if need(0) {
                    Some(kernels::reduce_to_shape(&kernels::mul(g, val(1))?, val(0).shape())?)
                } else {
                    None
                };
                let gb = if need(1) {
                    Some(kernels::reduce_to_shape(&kernels::mul(g, val(0))?, val(1).shape())?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Scale(k) | Op::GradScale(k) => vec![Some(kernels::scale(g, *k))],
            Op::Relu => {
                let gd: Vec<E> = g
                    .data()
                    .iter()
                    .zip(val(0).data())
                    .map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() })
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().clone(), gd))]
            }
            Op::Sigmoid => {
                let gd: Vec<E> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (E::one() - y))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().clone(), gd))]
            }
            Op::BatchNormTrain { .. } => {
                let Saved::BatchNorm(stats) = &node.saved else {
                    return Err(TensorError::State("batch norm node lost its statistics".into()));
                };
                let (dx, dg, db) =
                    norm::batchnorm_train_backward(g, &stats.normalized, val(1), &stats.inv_std)?;
                vec![Some(dx), Some(dg), Some(db)]
            }
            Op::BatchNormInfer { eps } => {
                let (dx, dg, db) =
                    norm::batchnorm_infer_backward(g, val(0), val(1), val(3), val(4), *eps)?;
                vec![Some(dx), Some(dg), Some(db), None, None]
            }
            Op::Softmax => vec![Some(kernels::softmax_backward(out, g)?)],
            Op::Reshape(_) => vec![Some(g.reshape(val(0).dims().to_vec())?)],
            Op::Transpose => vec![Some(kernels::transpose_last2(g)?)],
            Op::Concat => {
                let mut start = 0;
                let mut v = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let len = val(k).dims()[1];
                    v.push(if need(k) {
                        Some(kernels::narrow_channels(g, start, len)?)
                    } else {
                        None
                    });
                    start += len;
                }
                v
            }
            Op::Narrow { start, .. } => vec![Some(narrow_backward(g, val(0).shape(), *start))],
            Op::GlobalAvgPool => {
                let d = val(0).dims();
                let hw = d[2] * d[3];
                let inv = E::from_f64(1.0 / hw as f64);
                let mut gd = Vec::with_capacity(val(0).numel());
                for &gv in g.data() {
                    gd.extend(std::iter::repeat(gv * inv).take(hw));
                }
                vec![Some(Tensor::from_parts(val(0).shape().clone(), gd))]
            }
            Op::SumAll => {
                let gv = g.item()?;
                vec![Some(Tensor::from_parts(
                    val(0).shape().clone(),
                    vec![gv; val(0).numel()],
                ))]
            }
            Op::CrossEntropy(labels) => {
                let Saved::Probs(probs) = &node.saved else {
                    return Err(TensorError::State("cross-entropy node lost its probabilities".into()));
                };
                vec![Some(softmax::cross_entropy_backward(probs, labels, g.item()?))]
            }
        })
    }

    /// Recomputes every recorded node from its stored inputs and checks the
    /// result is bit-identical to what the forward pass produced.
    pub fn verify_replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let refs: Vec<&Tensor<E>> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
            let (again, _) = evaluate(&node.op, &refs)?;
            if !again.bit_eq(&self.values[node.output.0]) {
                return Err(TensorError::State(format!(
                    "replay of node {i} ({}) differs from the recorded output",
                    node.op.kind().name()
                )));
            }
        }
        Ok(())
    }
}

fn narrow_backward<E: Element>(g: &Tensor<E>, input: &Shape, start: usize) -> Tensor<E> {
    let d = input.dims();
    let len = g.dims()[1];
    let inner: usize = d[2..].iter().product();
    let mut out = vec![E::zero(); input.numel()];
    for (b, chunk) in g.data().chunks_exact(len * inner).enumerate() {
        let base = (b * d[1] + start) * inner;
        out[base..base + len * inner].copy_from_slice(chunk);
    }
    Tensor::from_parts(input.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(dims.to_vec(), v).unwrap()
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2], &[2.0, 3.0]).with_requires_grad(true));
        let b = g.leaf(t(&[2], &[5.0, 7.0]).with_requires_grad(true));
        let y = g.mul(a, b).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[1], &[3.0]).with_requires_grad(true));
        let y = g.add(a, a).unwrap();
        let y = g.mul(y, a).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        // d(2a^2)/da = 4a
        assert_eq!(g.grad(a).unwrap().data(), &[12.0]);
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::<f32>::inference();
        let a = g.leaf(Tensor::ones(vec![1]).unwrap().with_requires_grad(true));
        let s = g.sum_all(a).unwrap();
        assert_eq!(g.node_count(), 0);
        assert!(matches!(g.backward(s), Err(TensorError::State(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::ones(vec![2]).unwrap().with_requires_grad(true));
        let y = g.relu(a).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn non_finite_is_caught() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::from_vec(vec![1], vec![f32::MAX]).unwrap());
        assert!(matches!(g.scale(a, 10.0), Err(TensorError::NonFinite { .. })));
        g.set_check_finite(false);
        assert!(g.scale(a, 10.0).is_ok());
    }

    #[test]
    fn grad_scale_is_identity_forward() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2], &[1.0, -1.0]).with_requires_grad(true));
        let y = g.grad_scale(a, -3.0).unwrap();
        assert!(g.value(y).bit_eq(g.value(a)));
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[-3.0, -3.0]);
    }

    #[test]
    fn split_then_concat_round_trips_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::from_vec(vec![2, 4, 1, 1], (0..8).map(f64::from).collect())
                .unwrap()
                .with_requires_grad(true),
        );
        let parts = g.split(x, 2).unwrap();
        let y = g.concat(&[parts[1], parts[0]]).unwrap();
        let w = g.constant(Tensor::from_vec(vec![2, 4, 1, 1], (0..8).map(f64::from).collect()).unwrap());
        let y = g.mul(y, w).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(
            g.grad(x).unwrap().data(),
            &[2.0, 3.0, 0.0, 1.0, 6.0, 7.0, 4.0, 5.0]
        );
        g.verify_replay().unwrap();
    }

    #[test]
    fn profiler_counts_calls() {
        let mut g = Graph::<f32>::inference();
        g.enable_profiling();
        let a = g.leaf(Tensor::ones(vec![2, 2]).unwrap());
        let b = g.matmul(a, a).unwrap();
        g.relu(b).unwrap();
        let p = g.profile().unwrap();
        assert_eq!(p.get(OpKind::MatMul).calls, 1);
        assert_eq!(p.get(OpKind::Relu).calls, 1);
        assert_eq!(p.total_calls(), 2);
    }
}
