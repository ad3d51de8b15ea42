//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and the inputs
//! and saved state needed by its backward rule. Nodes are only ever appended,
//! so the tape is in topological order by construction and a backward pass is
//! a single reverse sweep.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, BatchStats, BnSaved};
use crate::tensor::{FlipKind, LabelMap, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a [`Tape::custom`] operation: maps the upstream gradient
/// and the input values to one gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Result<Vec<Tensor<T>>>>;

/// Running mean/variance tracked by a normalization layer for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// Exponential update. The running variance uses the unbiased batch
    /// estimate, as PyTorch does.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let n = batch.count as f64;
        let correction = if batch.count > 1 { T::from_f64(n / (n - 1.0)) } else { T::one() };
        let keep = T::one() - momentum;
        for (m, &bm) in self.mean.iter_mut().zip(&batch.mean) {
            *m = keep * *m + momentum * bm;
        }
        for (v, &bv) in self.var.iter_mut().zip(&batch.var) {
            *v = keep * *v + momentum * bv * correction;
        }
    }
}

/// Normalization mode. Inference requires running statistics.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    Train,
    Infer(Option<&'a RunningStats<T>>),
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    BilinearUp2 { x: Var },
    Flip { x: Var, kind: FlipKind },
    SliceChannels { x: Var, start: usize },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MaskedFill { x: Var, keep: Vec<bool> },
    Sum { x: Var },
    SoftmaxXent { logits: Var, probs: Tensor<T>, labels: LabelMap },
    Custom { inputs: Vec<Var>, backward: BackwardFn<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::BatchNorm { .. } => "batchnorm",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::BilinearUp2 { .. } => "bilinear_up2",
            Op::Flip { .. } => "flip",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Sum { .. } => "sum",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Custom { .. } => "custom",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Relu { x }
            | Op::MaxPool2 { x, .. }
            | Op::BilinearUp2 { x }
            | Op::Flip { x, .. }
            | Op::SliceChannels { x, .. }
            | Op::MaskedFill { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts } => parts.clone(),
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner record of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        #[cfg(debug_assertions)]
        {
            if !value.all_finite() && inputs.iter().all(|i| self.nodes[i.0].value.all_finite()) {
                panic!("{} produced a non-finite value from finite inputs", op.name());
            }
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (parameter or checked input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Conv2d { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = kernels::relu(self.value(x));
        Ok(self.push(y, Op::Relu { x }))
    }

    /// Batch normalization. In train mode the batch statistics are returned so
    /// the caller can fold them into its running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if eps <= T::zero() {
            return Err(Error::InvalidArgument("batchnorm eps must be > 0".into()));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (y, saved, stats) = match mode {
            BnMode::Train => {
                let (y, saved, stats) = kernels::batchnorm_train(xv, gv, bv, eps)?;
                (y, saved, Some(stats))
            }
            BnMode::Infer(Some(rs)) => {
                let (y, saved) = kernels::batchnorm_infer(xv, gv, bv, &rs.mean, &rs.var, eps)?;
                (y, saved, None)
            }
            BnMode::Infer(None) => {
                return Err(Error::InvalidArgument(
                    "inference-mode batchnorm needs initialized running statistics".into(),
                ))
            }
        };
        Ok((self.push(y, Op::BatchNorm { x, gamma, beta, saved }), stats))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2(self.value(x))?;
        Ok(self.push(y, Op::MaxPool2 { x, argmax }))
    }

    pub fn bilinear_up2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::bilinear_up2(self.value(x))?;
        Ok(self.push(y, Op::BilinearUp2 { x }))
    }

    pub fn flip(&mut self, x: Var, kind: FlipKind) -> Result<Var> {
        let y = self.value(x).flip(kind)?;
        Ok(self.push(y, Op::Flip { x, kind }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start, len)?;
        Ok(self.push(y, Op::SliceChannels { x, start }))
    }

    /// Four contiguous channel quarters.
    pub fn split4(&mut self, x: Var) -> Result<[Var; 4]> {
        let (_, c, _, _) = self.value(x).dims4()?;
        if c % 4 != 0 {
            return Err(Error::shape("split4", format!("{c} channels not divisible by 4")));
        }
        let q = c / 4;
        Ok([
            self.slice_channels(x, 0, q)?,
            self.slice_channels(x, q, q)?,
            self.slice_channels(x, 2 * q, q)?,
            self.slice_channels(x, 3 * q, q)?,
        ])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&refs)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    /// `out = x` where `keep`, `fill` elsewhere. The mask is a constant:
    /// gradient flows only through kept entries.
    pub fn masked_fill(&mut self, x: Var, keep: Vec<bool>, fill: T) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.len() {
            return Err(Error::shape("masked_fill", format!("mask {} vs {}", keep.len(), xv.len())));
        }
        let data = xv.data().iter().zip(&keep).map(|(&v, &k)| if k { v } else { fill }).collect();
        let y = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(y, Op::MaskedFill { x, keep }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        Ok(self.push(y, Op::Sum { x }))
    }

    /// Mean softmax cross-entropy over all pixels; a scalar.
    pub fn softmax_xent(&mut self, logits: Var, labels: &LabelMap) -> Result<Var> {
        let (loss, probs) = kernels::softmax_xent(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, probs, labels: labels.clone() }))
    }

    /// Operation with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward })
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            // keep the node's own gradient available to callers
            grads[i] = Some(g);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b } => {
                let need_gx = self.nodes[x.0].requires_grad;
                let gr = kernels::conv2d_backward(val(*x), val(*w), b.is_some(), need_gx, g)?;
                let mut out = vec![(*w, gr.w)];
                if let Some(gx) = gr.x {
                    out.push((*x, gx));
                }
                if let (Some(b), Some(gb)) = (b, gr.b) {
                    out.push((*b, gb));
                }
                out
            }
            Op::Relu { x } => vec![(*x, kernels::relu_backward(val(*x), g)?)],
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (gx, gg, gb) = kernels::batchnorm_backward(val(*gamma), saved, g)?;
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::MaxPool2 { x, argmax } => {
                vec![(*x, kernels::maxpool2_backward(val(*x).shape(), argmax, g)?)]
            }
            Op::BilinearUp2 { x } => vec![(*x, kernels::bilinear_up2_backward(val(*x).shape(), g)?)],
            Op::Flip { x, kind } => vec![(*x, g.flip(kind.inverse())?)],
            Op::SliceChannels { x, start } => {
                let xs = val(*x);
                let (n, c, h, w) = xs.dims4()?;
                let len = g.shape()[1];
                let plane = h * w;
                let mut gx = Tensor::zeros(xs.shape());
                let d = gx.data_mut();
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    d[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                }
                vec![(*x, gx)]
            }
            Op::Concat { parts } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).shape()[1];
                    out.push((p, g.slice_channels(start, len)?));
                    start += len;
                }
                out
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::MaskedFill { x, keep } => {
                let data = g.data().iter().zip(keep).map(|(&v, &k)| if k { v } else { T::zero() }).collect();
                vec![(*x, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::SoftmaxXent { logits, probs, labels } => {
                vec![(*logits, kernels::softmax_xent_backward(probs, labels, g.data()[0])?)]
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = backward(g, &vals)?;
                if gs.len() != inputs.len() {
                    return Err(Error::InvalidArgument(format!(
                        "custom backward returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    )));
                }
                inputs.iter().copied().zip(gs).collect()
            }
        })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `v`, if it depends on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient or zeros shaped like `v`'s value.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_use_accumulates() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let s = t.sum(z).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::ones(&[3]));
        let c = t.constant(Tensor::full(&[3], 2.0));
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn infer_batchnorm_without_stats_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::ones(&[1, 2, 2, 2]));
        let g = t.leaf(Tensor::ones(&[2]));
        let b = t.leaf(Tensor::zeros(&[2]));
        assert!(t.batchnorm(x, g, b, BnMode::Infer(None), 1e-5).is_err());
        let rs = RunningStats::new(2);
        assert!(t.batchnorm(x, g, b, BnMode::Infer(Some(&rs)), 1e-5).is_ok());
    }

    #[test]
    fn running_stats_update() {
        let mut rs = RunningStats::<f64>::new(1);
        rs.update(&BatchStats { mean: vec![2.0], var: vec![1.0], count: 2 }, 0.1);
        assert!((rs.mean[0] - 0.2).abs() < 1e-15);
        assert!((rs.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }
}
