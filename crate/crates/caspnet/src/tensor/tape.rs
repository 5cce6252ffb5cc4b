//! Reverse-mode autodiff tape.
//!
//! Ops append nodes to the tape in execution order; node ids are therefore
//! already topologically sorted and [`Tape::backward`] is a single reverse
//! sweep. Intermediate values and gradients are dropped as soon as the sweep
//! has consumed them, so peak memory stays close to one forward pass. Leaf
//! gradients survive and are read back with [`Tape::grad`].

use std::collections::HashMap;

use super::ops::{self, NormMode};
use super::{Element, GridTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: (usize, usize),
        dilation: usize,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: (usize, usize),
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
        in_shape: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
        stats_from_batch: bool,
    },
    SoftmaxCh {
        x: NodeId,
    },
    Bilinear2x {
        x: NodeId,
        in_shape: Vec<usize>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    MulConst {
        x: NodeId,
        k: GridTensor<T>,
    },
    ConcatCh {
        xs: Vec<NodeId>,
        channels: Vec<usize>,
    },
    SliceCh {
        x: NodeId,
        from: usize,
        to: usize,
    },
    BroadcastMulCh {
        a: NodeId,
        s: NodeId,
    },
    MaxN {
        xs: Vec<NodeId>,
        arg: Vec<u8>,
    },
    Sum {
        x: NodeId,
    },
    FocalLoss {
        p: NodeId,
        y: GridTensor<T>,
        inv_e1: T,
        alpha: T,
        beta: T,
        gamma: T,
        clamp_eps: T,
    },
    OffsetLoss {
        pred: NodeId,
        target: GridTensor<T>,
        mask: Vec<bool>,
    },
}

struct Node<T: Element> {
    value: GridTensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<GridTensor<T>>>,
    param_leaves: HashMap<usize, NodeId>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_leaves: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &GridTensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: GridTensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// New leaf holding a constant or input value.
    pub fn leaf(&mut self, value: GridTensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        self.leaf(GridTensor::zeros(shape))
    }

    /// Leaf bound to an external parameter slot, memoized so that a
    /// parameter used in several places shares one node (and therefore one
    /// accumulated gradient).
    pub fn param_leaf(&mut self, slot: usize, value: &GridTensor<T>) -> NodeId {
        if let Some(&id) = self.param_leaves.get(&slot) {
            return id;
        }
        let id = self.leaf(value.clone());
        self.param_leaves.insert(slot, id);
        id
    }

    /// Iterate over `(parameter slot, leaf node)` bindings.
    pub fn param_bindings(&self) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.param_leaves.iter().map(|(&s, &id)| (s, id))
    }

    // -- ops ----------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: (usize, usize),
        dilation: usize,
    ) -> Result<NodeId> {
        let out = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            dilation,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
            },
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let out = ops::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(out, Op::ConvT2d { x, w, b, stride, pad }))
    }

    pub fn max_pool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let in_shape = self.shape(x).to_vec();
        let (out, argmax) = ops::max_pool2d(self.value(x), k, stride)?;
        Ok(self.push(out, Op::MaxPool { x, argmax, in_shape }))
    }

    /// Batch norm with single-sample spatial statistics. In `Train` mode the
    /// current statistics are used (and retrievable via [`Tape::bn_stats`]
    /// for the caller to fold into running estimates); in `Eval` mode the
    /// provided running estimates are used as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &GridTensor<T>,
        running_var: &GridTensor<T>,
        mode: NormMode,
        eps: T,
    ) -> Result<NodeId> {
        let fwd = ops::bn_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            mode,
            eps,
        )?;
        Ok(self.push(
            fwd.out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: fwd.mean,
                var: fwd.var,
                eps,
                stats_from_batch: mode == NormMode::Train,
            },
        ))
    }

    /// Statistics a batch-norm node normalized with.
    pub fn bn_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::softmax_channels(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxCh { x }))
    }

    pub fn bilinear_upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let in_shape = self.shape(x).to_vec();
        let out = ops::bilinear_upsample2x(self.value(x))?;
        Ok(self.push(out, Op::Bilinear2x { x, in_shape }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = T::one();
        let out = self.value(x).map(|v| one / (one + (-v).exp()));
        self.push(out, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh { x })
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} operands differ in shape: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = GridTensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = GridTensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Elementwise product with a constant tensor (not differentiated
    /// through the constant).
    pub fn mul_const(&mut self, x: NodeId, k: GridTensor<T>) -> Result<NodeId> {
        if self.shape(x) != k.shape() {
            return Err(Error::shape(format!(
                "mul_const operands differ in shape: {:?} vs {:?}",
                self.shape(x),
                k.shape()
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(k.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let out = GridTensor::new(k.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst { x, k }))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let (c0, h, w) = self.value(xs[0]).dims3()?;
        let mut channels = vec![c0];
        let mut total = c0;
        for &x in &xs[1..] {
            let (c, xh, xw) = self.value(x).dims3()?;
            if (xh, xw) != (h, w) {
                return Err(Error::shape(format!(
                    "concat spatial mismatch: {}x{} vs {}x{}",
                    xh, xw, h, w
                )));
            }
            channels.push(c);
            total += c;
        }
        let mut data = Vec::with_capacity(total * h * w);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let out = GridTensor::new(vec![total, h, w], data)?;
        Ok(self.push(
            out,
            Op::ConcatCh {
                xs: xs.to_vec(),
                channels,
            },
        ))
    }

    pub fn slice_channels(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let out = self.value(x).slice_channels(from, to)?;
        Ok(self.push(out, Op::SliceCh { x, from, to }))
    }

    /// Multiply a `(c, h, w)` tensor by a `(1, h, w)` map, broadcast over
    /// channels.
    pub fn broadcast_mul_channel(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(a).dims3()?;
        let (sc, sh, sw) = self.value(s).dims3()?;
        if sc != 1 || (sh, sw) != (h, w) {
            return Err(Error::shape(format!(
                "broadcast map must be (1, {h}, {w}), got {:?}",
                self.value(s).shape()
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(c * plane);
        for ci in 0..c {
            let av = &self.value(a).data()[ci * plane..(ci + 1) * plane];
            for (x, y) in av.iter().zip(self.value(s).data()) {
                data.push(*x * *y);
            }
        }
        let out = GridTensor::new(vec![c, h, w], data)?;
        Ok(self.push(out, Op::BroadcastMulCh { a, s }))
    }

    /// Elementwise maximum over several same-shaped tensors; ties keep the
    /// earliest input so replay stays deterministic.
    pub fn max_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() || xs.len() > u8::MAX as usize {
            return Err(Error::shape(format!("max over {} tensors", xs.len())));
        }
        for &x in &xs[1..] {
            self.check_same_shape(xs[0], x, "max")?;
        }
        let n = self.value(xs[0]).numel();
        let mut data = self.value(xs[0]).data().to_vec();
        let mut arg = vec![0u8; n];
        for (which, &x) in xs.iter().enumerate().skip(1) {
            for (i, &v) in self.value(x).data().iter().enumerate() {
                if v > data[i] {
                    data[i] = v;
                    arg[i] = which as u8;
                }
            }
        }
        let out = GridTensor::new(self.shape(xs[0]).to_vec(), data)?;
        Ok(self.push(
            out,
            Op::MaxN {
                xs: xs.to_vec(),
                arg,
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        self.push(GridTensor::scalar(s), Op::Sum { x })
    }

    /// Distance-aware focal loss of one class channel at one step against
    /// its ground-truth heat map; `y` and the normalization count are
    /// constants. Probabilities are clamped to `[clamp_eps, 1 - clamp_eps]`
    /// inside the logarithms.
    #[allow(clippy::too_many_arguments)]
    pub fn focal_class_loss(
        &mut self,
        p: NodeId,
        y: GridTensor<T>,
        e_count: usize,
        alpha: T,
        beta: T,
        gamma: T,
        clamp_eps: T,
    ) -> Result<NodeId> {
        if self.shape(p) != y.shape() {
            return Err(Error::shape(format!(
                "focal loss shapes differ: {:?} vs {:?}",
                self.shape(p),
                y.shape()
            )));
        }
        if y.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::input("ground-truth heat map values must lie in [0, 1]"));
        }
        let inv_e1 = T::one() / (T::from_f64(e_count as f64) + T::one());
        let value = focal_forward(
            self.value(p).data(),
            y.data(),
            inv_e1,
            alpha,
            beta,
            gamma,
            clamp_eps,
        );
        Ok(self.push(
            GridTensor::scalar(value),
            Op::FocalLoss {
                p,
                y,
                inv_e1,
                alpha,
                beta,
                gamma,
                clamp_eps,
            },
        ))
    }

    /// Sum of squared offset errors over masked pixels. `pred` and `target`
    /// are `(2, h, w)`; the mask is one flag per pixel.
    pub fn offset_loss(
        &mut self,
        pred: NodeId,
        target: GridTensor<T>,
        mask: Vec<bool>,
    ) -> Result<NodeId> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(format!(
                "offset loss shapes differ: {:?} vs {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let (c, h, w) = target.dims3()?;
        if c != 2 || mask.len() != h * w {
            return Err(Error::shape(format!(
                "offset loss wants (2, h, w) tensors and an h*w mask, got {:?} and {}",
                target.shape(),
                mask.len()
            )));
        }
        let plane = h * w;
        let mut s = T::zero();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                for ch in 0..2 {
                    let d = self.value(pred).data()[ch * plane + i] - target.data()[ch * plane + i];
                    s = s + d * d;
                }
            }
        }
        Ok(self.push(
            GridTensor::scalar(s),
            Op::OffsetLoss { pred, target, mask },
        ))
    }

    // -- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Gradients of leaves are kept
    /// (see [`Tape::grad`]); intermediate values and gradients are freed as
    /// the sweep passes them. A tape can only be swept once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::config(
                "backward called twice on the same tape; rebuild the graph first",
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(GridTensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![T::one()],
        )?);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                self.grads[i] = Some(g);
                continue;
            }
            self.step_backward(i, &g)?;
            // This node's value and gradient can no longer be needed.
            self.nodes[i].value = GridTensor::zeros(&[0]);
        }
        Ok(())
    }

    /// Gradient of the loss w.r.t. a leaf, available after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&GridTensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<GridTensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    fn accumulate(&mut self, id: NodeId, add: GridTensor<T>) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gv, av) in g.data_mut().iter_mut().zip(add.data()) {
                    *gv = *gv + *av;
                }
            }
            slot @ None => *slot = Some(add),
        }
    }

    fn step_backward(&mut self, i: usize, g: &GridTensor<T>) -> Result<()> {
        // `Op` owns no node references into `self.nodes` storage, but we need
        // simultaneous access to op metadata and neighbor values; take the op
        // out, run, put it back is avoided by matching on a raw pointer-free
        // clone of the small metadata where possible.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => unreachable!("leaf handled by caller"),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
            } => {
                let (dx, dw, db) = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    b.is_some(),
                    *stride,
                    *pad,
                    *dilation,
                )?;
                self.accumulate(*x, dx);
                self.accumulate(*w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(*b, db);
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = ops::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    b.is_some(),
                    *stride,
                    *pad,
                )?;
                self.accumulate(*x, dx);
                self.accumulate(*w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(*b, db);
                }
            }
            Op::MaxPool { x, argmax, in_shape } => {
                let dx = ops::max_pool2d_backward(in_shape, argmax, g);
                self.accumulate(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                stats_from_batch,
            } => {
                let (dx, dgamma, dbeta) = ops::bn_backward(
                    self.value(*x),
                    self.value(*gamma),
                    mean,
                    var,
                    *eps,
                    *stats_from_batch,
                    g,
                );
                self.accumulate(*x, dx);
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::SoftmaxCh { x } => {
                let dx = ops::softmax_channels_backward(&self.nodes[i].value, g);
                self.accumulate(*x, dx);
            }
            Op::Bilinear2x { x, in_shape } => {
                let dx = ops::bilinear_upsample2x_backward(in_shape, g);
                self.accumulate(*x, dx);
            }
            Op::Relu { x } => {
                let y = &self.nodes[i].value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| if yv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(*x, GridTensor::new(y.shape().to_vec(), data)?);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                    .collect();
                self.accumulate(*x, GridTensor::new(y.shape().to_vec(), data)?);
            }
            Op::Tanh { x } => {
                let y = &self.nodes[i].value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * (T::one() - yv * yv))
                    .collect();
                self.accumulate(*x, GridTensor::new(y.shape().to_vec(), data)?);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = g
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db: Vec<T> = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.accumulate(*a, GridTensor::new(g.shape().to_vec(), da)?);
                self.accumulate(*b, GridTensor::new(g.shape().to_vec(), db)?);
            }
            Op::Scale { x, c } => {
                self.accumulate(*x, g.map(|v| v * *c));
            }
            Op::MulConst { x, k } => {
                let data = g
                    .data()
                    .iter()
                    .zip(k.data())
                    .map(|(&gv, &kv)| gv * kv)
                    .collect();
                self.accumulate(*x, GridTensor::new(g.shape().to_vec(), data)?);
            }
            Op::ConcatCh { xs, channels } => {
                let (_, h, w) = g.dims3()?;
                let plane = h * w;
                let mut off = 0usize;
                for (&x, &c) in xs.iter().zip(channels) {
                    let part = GridTensor::new(
                        vec![c, h, w],
                        g.data()[off * plane..(off + c) * plane].to_vec(),
                    )?;
                    self.accumulate(x, part);
                    off += c;
                }
            }
            Op::SliceCh { x, from, to } => {
                let shape = self.value(*x).shape().to_vec();
                let (_, h, w) = (shape[0], shape[1], shape[2]);
                let plane = h * w;
                let mut dx = GridTensor::zeros(&shape);
                dx.data_mut()[from * plane..to * plane].copy_from_slice(g.data());
                self.accumulate(*x, dx);
            }
            Op::BroadcastMulCh { a, s } => {
                let (c, h, w) = self.value(*a).dims3()?;
                let plane = h * w;
                let mut da = vec![T::zero(); c * plane];
                let mut ds = vec![T::zero(); plane];
                for ci in 0..c {
                    for p in 0..plane {
                        let gv = g.data()[ci * plane + p];
                        da[ci * plane + p] = gv * self.value(*s).data()[p];
                        ds[p] = ds[p] + gv * self.value(*a).data()[ci * plane + p];
                    }
                }
                self.accumulate(*a, GridTensor::new(vec![c, h, w], da)?);
                self.accumulate(*s, GridTensor::new(vec![1, h, w], ds)?);
            }
            Op::MaxN { xs, arg } => {
                for (which, &x) in xs.iter().enumerate() {
                    let data: Vec<T> = arg
                        .iter()
                        .zip(g.data())
                        .map(|(&a, &gv)| if a as usize == which { gv } else { T::zero() })
                        .collect();
                    self.accumulate(x, GridTensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Sum { x } => {
                let gv = g.item();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(*x, GridTensor::full(&shape, gv));
            }
            Op::FocalLoss {
                p,
                y,
                inv_e1,
                alpha,
                beta,
                gamma,
                clamp_eps,
            } => {
                let gv = g.item();
                let dp = focal_backward(
                    self.value(*p).data(),
                    y.data(),
                    *inv_e1,
                    *alpha,
                    *beta,
                    *gamma,
                    *clamp_eps,
                    gv,
                );
                self.accumulate(*p, GridTensor::new(y.shape().to_vec(), dp)?);
            }
            Op::OffsetLoss { pred, target, mask } => {
                let gv = g.item();
                let (_, h, w) = target.dims3()?;
                let plane = h * w;
                let two = T::from_f64(2.0);
                let mut dp = vec![T::zero(); 2 * plane];
                for (i_px, &m) in mask.iter().enumerate() {
                    if m {
                        for ch in 0..2 {
                            let idx = ch * plane + i_px;
                            let d = self.value(*pred).data()[idx] - target.data()[idx];
                            dp[idx] = two * d * gv;
                        }
                    }
                }
                self.accumulate(*pred, GridTensor::new(target.shape().to_vec(), dp)?);
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

fn focal_forward<T: Element>(
    p: &[T],
    y: &[T],
    inv_e1: T,
    alpha: T,
    beta: T,
    gamma: T,
    clamp_eps: T,
) -> T {
    let one = T::one();
    let hi = one - clamp_eps;
    let mut s = T::zero();
    for (&pv, &yv) in p.iter().zip(y) {
        let pc = pv.max(clamp_eps).min(hi);
        if yv == one {
            s = s + alpha * (one - pc).powf(gamma) * pc.ln();
        } else {
            s = s + (one - alpha) * (one - yv).powf(beta) * pc.powf(gamma) * (one - pc).ln();
        }
    }
    -inv_e1 * s
}

#[allow(clippy::too_many_arguments)]
fn focal_backward<T: Element>(
    p: &[T],
    y: &[T],
    inv_e1: T,
    alpha: T,
    beta: T,
    gamma: T,
    clamp_eps: T,
    upstream: T,
) -> Vec<T> {
    let one = T::one();
    let hi = one - clamp_eps;
    let scale = -inv_e1 * upstream;
    p.iter()
        .zip(y)
        .map(|(&pv, &yv)| {
            let pc = pv.max(clamp_eps).min(hi);
            if pv < clamp_eps || pv > hi {
                // clamped flat region
                return T::zero();
            }
            let d = if yv == one {
                alpha
                    * ((one - pc).powf(gamma) / pc
                        - gamma * (one - pc).powf(gamma - one) * pc.ln())
            } else {
                (one - alpha)
                    * (one - yv).powf(beta)
                    * (gamma * pc.powf(gamma - one) * (one - pc).ln()
                        - pc.powf(gamma) / (one - pc))
            };
            scale * d
        })
        .collect()
}
