//! Reverse-mode differentiation over the kernels in [`super::ops`].
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; calling
//! [`Tape::backward`] walks the record in reverse and accumulates
//! gradients. Inputs that do not depend on a differentiable leaf are
//! skipped, so image tensors never receive gradients.

use crate::error::Result;
use crate::nn::ops::{self, BnCache, RunningStats};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Deconv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool { x: Var, arg: Vec<u32> },
    Upsample { x: Var },
    BnTrain { x: Var, gamma: Var, beta: Var, cache: BnCache<T> },
    BnEval { x: Var, gamma: Var, beta: Var, stats: RunningStats<T> },
    Relu { x: Var, mask: Option<Vec<bool>> },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    MulBroadcast { x: Var, alpha: Var },
    Concat { parts: Vec<Var> },
    PadChannels { x: Var, stride: usize },
    Bce { pred: Var, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Branch decisions of the piecewise-linear operations (ReLU masks and
/// max-pool argmaxes) in the order they were recorded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BranchLog {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<u32>>,
}

#[derive(Default)]
enum Branching {
    #[default]
    Free,
    Record(BranchLog),
    Replay { log: BranchLog, relu: usize, pool: usize },
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    branching: Branching,
}

/// Gradients indexed by [`Var`]; `None` for values that did not receive one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), branching: Branching::Free }
    }

    /// Tape that logs every ReLU mask and pooling argmax.
    pub fn recording() -> Self {
        Self { nodes: Vec::new(), branching: Branching::Record(BranchLog::default()) }
    }

    /// Tape that reuses the branch decisions of an earlier recording, so
    /// the network is evaluated on the same linear piece. The graph must
    /// be built in the same order as when it was recorded.
    pub fn replaying(log: BranchLog) -> Self {
        Self { nodes: Vec::new(), branching: Branching::Replay { log, relu: 0, pool: 0 } }
    }

    /// The recorded branch log, if this tape was recording.
    pub fn branch_log(&self) -> Option<&BranchLog> {
        match &self.branching {
            Branching::Record(log) => Some(log),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d_raw(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, stride, pad }, &inputs))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::deconv2d_raw(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Deconv { x, w, b, stride, pad }, &inputs))
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (mut out, mut arg) = ops::max_pool2d_indexed(self.value(x), window, window)?;
        match &mut self.branching {
            Branching::Free => {}
            Branching::Record(log) => log.pool.push(arg.clone()),
            Branching::Replay { log, pool, .. } => {
                let fixed = log.pool.get(*pool).filter(|a| a.len() == arg.len()).ok_or_else(|| {
                    crate::Error::Shape("branch replay diverged from the recorded graph".into())
                })?;
                *pool += 1;
                arg = fixed.clone();
                let src = self.nodes[x.0].value.data();
                for (o, &i) in out.data_mut().iter_mut().zip(&arg) {
                    *o = src[i as usize];
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { x, arg }, &[x]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2x(self.value(x))?;
        Ok(self.push(out, Op::Upsample { x }, &[x]))
    }

    /// Training-mode batch norm; returns the output and the batch statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let (out, cache) = ops::batchnorm_train(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            ops::BN_EPS,
        )?;
        let stats = BatchStats { mean: cache.mean.clone(), var_unbiased: cache.var_unbiased.clone() };
        Ok((self.push(out, Op::BnTrain { x, gamma, beta, cache }, &[x, gamma, beta]), stats))
    }

    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: RunningStats<T>) -> Result<Var> {
        let out = ops::batchnorm_eval(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            &stats,
            ops::BN_EPS,
        )?;
        Ok(self.push(out, Op::BnEval { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (out, mask) = match &mut self.branching {
            Branching::Free => (ops::relu(xv), None),
            Branching::Record(log) => {
                log.relu.push(xv.data().iter().map(|&v| v > T::zero()).collect());
                (ops::relu(xv), None)
            }
            Branching::Replay { log, relu, .. } => {
                let mask = log.relu.get(*relu).filter(|m| m.len() == xv.numel()).cloned();
                *relu += 1;
                let mask = mask.expect("branch replay diverged from the recorded graph");
                let mut out = xv.clone();
                out.data_mut().iter_mut().zip(&mask).for_each(|(v, &keep)| {
                    if !keep {
                        *v = T::zero();
                    }
                });
                (out, Some(mask))
            }
        };
        self.push(out, Op::Relu { x, mask }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(crate::Error::Shape(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul_broadcast(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let out = ops::mul_broadcast(self.value(x), self.value(alpha))?;
        Ok(self.push(out, Op::MulBroadcast { x, alpha }, &[x, alpha]))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&values)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn pad_channels(&mut self, x: Var, out_channels: usize, stride: usize) -> Result<Var> {
        let out = ops::pad_channels(self.value(x), out_channels, stride)?;
        Ok(self.push(out, Op::PadChannels { x, stride }, &[x]))
    }

    /// Mean binary cross-entropy against a fixed target; a one-element value.
    pub fn bce(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let loss = ops::bce_loss(self.value(pred), &target)?;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, target }, &[pred]))
    }

    /// Reverse pass seeded with `d(root)/d(root) = 1` (summed over elements
    /// when `root` is not a scalar).
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let mut acc = |v: Var, g: Tensor<T>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), &dy, *stride, *pad, needs(*x));
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if needs(*w) {
                        acc(*w, dw);
                    }
                    if let Some(b) = b.filter(|b| needs(*b)) {
                        let shape = self.value(b).shape().to_vec();
                        acc(b, Tensor::from_vec(&shape, db.into_data()).expect("bias shape"));
                    }
                }
                Op::Deconv { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        ops::deconv2d_backward(self.value(*x), self.value(*w), &dy, *stride, *pad, needs(*x));
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if needs(*w) {
                        acc(*w, dw);
                    }
                    if let Some(b) = b.filter(|b| needs(*b)) {
                        let shape = self.value(b).shape().to_vec();
                        acc(b, Tensor::from_vec(&shape, db.into_data()).expect("bias shape"));
                    }
                }
                Op::MaxPool { x, arg } => {
                    acc(*x, ops::max_pool2d_backward(&dy, arg, self.value(*x).shape()));
                }
                Op::Upsample { x } => {
                    acc(*x, ops::upsample2x_backward(&dy, self.value(*x).shape()));
                }
                Op::BnTrain { x, gamma, beta, cache } => {
                    let (dx, dg, db) = ops::batchnorm_train_backward(&dy, cache, self.value(*gamma).data());
                    self.acc_affine(&mut acc, *gamma, *beta, dg, db);
                    if needs(*x) {
                        acc(*x, dx);
                    }
                }
                Op::BnEval { x, gamma, beta, stats } => {
                    let (dx, dg, db) = ops::batchnorm_eval_backward(
                        &dy,
                        self.value(*x),
                        self.value(*gamma).data(),
                        stats,
                        ops::BN_EPS,
                    );
                    self.acc_affine(&mut acc, *gamma, *beta, dg, db);
                    if needs(*x) {
                        acc(*x, dx);
                    }
                }
                Op::Relu { x, mask } => {
                    let mut g = dy;
                    match mask {
                        Some(mask) => g.data_mut().iter_mut().zip(mask).for_each(|(g, &keep)| {
                            if !keep {
                                *g = T::zero();
                            }
                        }),
                        None => g.data_mut().iter_mut().zip(self.value(*x).data()).for_each(|(g, &v)| {
                            if v <= T::zero() {
                                *g = T::zero();
                            }
                        }),
                    }
                    acc(*x, g);
                }
                Op::Sigmoid { x } => {
                    let mut g = dy;
                    g.data_mut().iter_mut().zip(node.value.data()).for_each(|(g, &s)| {
                        *g *= s * (T::one() - s);
                    });
                    acc(*x, g);
                }
                Op::Add { a, b } => {
                    if needs(*a) && needs(*b) {
                        acc(*a, dy.clone());
                        acc(*b, dy);
                    } else if needs(*a) {
                        acc(*a, dy);
                    } else {
                        acc(*b, dy);
                    }
                }
                Op::MulBroadcast { x, alpha } => {
                    let (dx, da) = ops::mul_broadcast_backward(&dy, self.value(*x), self.value(*alpha));
                    if needs(*x) {
                        acc(*x, dx);
                    }
                    if needs(*alpha) {
                        acc(*alpha, da);
                    }
                }
                Op::Concat { parts } => {
                    let chans: Vec<usize> = parts.iter().map(|p| self.value(*p).channels()).collect();
                    for (p, g) in parts.iter().zip(ops::split_channels(&dy, &chans)) {
                        if needs(*p) {
                            acc(*p, g);
                        }
                    }
                }
                Op::PadChannels { x, stride } => {
                    acc(*x, ops::pad_channels_backward(&dy, self.value(*x).shape(), *stride));
                }
                Op::Bce { pred, target } => {
                    let mut g = ops::bce_grad(self.value(*pred), target).expect("validated in forward");
                    let scale = dy.data()[0];
                    g.data_mut().iter_mut().for_each(|v| *v *= scale);
                    acc(*pred, g);
                }
            }
        }
        Gradients { grads }
    }

    fn acc_affine(
        &self,
        acc: &mut impl FnMut(Var, Tensor<T>),
        gamma: Var,
        beta: Var,
        dg: Vec<T>,
        db: Vec<T>,
    ) {
        if self.nodes[gamma.0].requires_grad {
            let shape = self.value(gamma).shape().to_vec();
            acc(gamma, Tensor::from_vec(&shape, dg).expect("gamma shape"));
        }
        if self.nodes[beta.0].requires_grad {
            let shape = self.value(beta).shape().to_vec();
            acc(beta, Tensor::from_vec(&shape, db).expect("beta shape"));
        }
    }
}
