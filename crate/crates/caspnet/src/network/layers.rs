//! Parameter registry and the layer building blocks the network is wired
//! from. Layers own parameter ids, not tensors; the registry owns the
//! tensors so the trainer can update them in place and the checkpoint code
//! can enumerate them by name.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, GridTensor, NodeId, NormMode, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: GridTensor<T>,
    pub trainable: bool,
}

/// Flat store of every tensor the network owns, trainable or not.
#[derive(Debug, Clone, Default)]
pub struct Registry<T: Element> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> Registry<T> {
    pub fn new() -> Self {
        Registry { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: GridTensor<T>, trainable: bool) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &GridTensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut GridTensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar values across trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}

/// One batch-norm application on a tape: which running-stat parameters it
/// used and the node whose saved statistics should be folded into them.
#[derive(Debug, Clone, Copy)]
pub struct BnUse {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub node: NodeId,
}

/// Everything a layer needs to record one forward pass.
pub struct ForwardCtx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub registry: &'a Registry<T>,
    pub mode: NormMode,
    pub bn_uses: Vec<BnUse>,
}

impl<'a, T: Element> ForwardCtx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, registry: &'a Registry<T>, mode: NormMode) -> Self {
        ForwardCtx {
            tape,
            registry,
            mode,
            bn_uses: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.tape.param_leaf(id.0, self.registry.get(id))
    }
}

/// Uniform He initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
/// Drawn at f64 so f32 and f64 networks share the same underlying values.
fn he_uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> GridTensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    GridTensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: (usize, usize),
    pub dilation: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: (usize, usize),
        dilation: usize,
        bias: bool,
    ) -> Self {
        let (kh, kw) = kernel;
        let weight = reg.add(
            format!("{name}.weight"),
            he_uniform(rng, &[c_out, c_in, kh, kw], c_in * kh * kw),
            true,
        );
        let bias = bias.then(|| reg.add(format!("{name}.bias"), GridTensor::zeros(&[c_out]), true));
        Conv2dLayer {
            weight,
            bias,
            stride,
            pad,
            dilation,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut ForwardCtx<T>, x: NodeId) -> Result<NodeId> {
        let w = ctx.param(self.weight);
        self.forward_with_weight(ctx, x, w)
    }

    /// Forward with an explicit weight node (used when the stored weight is
    /// transformed on the tape before the convolution).
    pub fn forward_with_weight<T: Element>(
        &self,
        ctx: &mut ForwardCtx<T>,
        x: NodeId,
        w: NodeId,
    ) -> Result<NodeId> {
        let b = self.bias.map(|id| ctx.param(id));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad, self.dilation)
    }
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm2dLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2dLayer {
    pub fn new<T: Element>(reg: &mut Registry<T>, name: &str, channels: usize) -> Self {
        BatchNorm2dLayer {
            gamma: reg.add(format!("{name}.gamma"), GridTensor::full(&[channels], T::one()), true),
            beta: reg.add(format!("{name}.beta"), GridTensor::zeros(&[channels]), true),
            running_mean: reg.add(
                format!("{name}.running_mean"),
                GridTensor::zeros(&[channels]),
                false,
            ),
            running_var: reg.add(
                format!("{name}.running_var"),
                GridTensor::full(&[channels], T::one()),
                false,
            ),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut ForwardCtx<T>, x: NodeId) -> Result<NodeId> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let node = ctx.tape.batch_norm2d(
            x,
            gamma,
            beta,
            ctx.registry.get(self.running_mean),
            ctx.registry.get(self.running_var),
            ctx.mode,
            T::from_f64(self.eps),
        )?;
        if ctx.mode == NormMode::Train {
            ctx.bn_uses.push(BnUse {
                running_mean: self.running_mean,
                running_var: self.running_var,
                node,
            });
        }
        Ok(node)
    }
}

// ---------------------------------------------------------------------------
// oriented-kernel (Gabor-modulated) convolution
// ---------------------------------------------------------------------------

/// Gabor envelope over kernel offsets: a cosine wave along orientation
/// `theta` under an isotropic Gaussian window.
fn gabor_mask_values(kh: usize, kw: usize, theta: f64) -> Vec<f64> {
    let sigma = 1.5;
    let lambda = 4.0;
    let (s, c) = theta.sin_cos();
    let ch = (kh as f64 - 1.0) / 2.0;
    let cw = (kw as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(kh * kw);
    for i in 0..kh {
        for j in 0..kw {
            let y = i as f64 - ch;
            let x = j as f64 - cw;
            let xr = x * c + y * s;
            let yr = -x * s + y * c;
            let env = (-(xr * xr + yr * yr) / (2.0 * sigma * sigma)).exp();
            let wave = (std::f64::consts::TAU * xr / lambda).cos();
            out.push(env * wave);
        }
    }
    out
}

/// Convolution block whose kernel is modulated by a bank of fixed oriented
/// Gabor envelopes; the branch responses are combined by elementwise max.
/// With an empty bank it is exactly the plain convolution.
#[derive(Debug, Clone)]
pub struct GaborConv2d<T: Element> {
    pub conv: Conv2dLayer,
    masks: Vec<GridTensor<T>>,
}

impl<T: Element> GaborConv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut Registry<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        pad: (usize, usize),
        orientations: usize,
    ) -> Self {
        let conv = Conv2dLayer::new(reg, rng, name, c_in, c_out, kernel, 1, pad, 1, true);
        let (kh, kw) = kernel;
        let masks = (0..orientations)
            .map(|o| {
                let theta = std::f64::consts::PI * o as f64 / orientations as f64;
                let vals = gabor_mask_values(kh, kw, theta);
                GridTensor::from_fn(&[c_out, c_in, kh, kw], |idx| {
                    T::from_f64(vals[idx % (kh * kw)])
                })
            })
            .collect();
        GaborConv2d { conv, masks }
    }

    pub fn plain(
        reg: &mut Registry<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        GaborConv2d {
            conv: Conv2dLayer::new(reg, rng, name, c_in, c_out, kernel, 1, pad, 1, true),
            masks: Vec::new(),
        }
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<T>, x: NodeId) -> Result<NodeId> {
        if self.masks.is_empty() {
            return self.conv.forward(ctx, x);
        }
        let w = ctx.param(self.conv.weight);
        let mut branches = Vec::with_capacity(self.masks.len());
        for mask in &self.masks {
            let mw = ctx.tape.mul_const(w, mask.clone())?;
            branches.push(self.conv.forward_with_weight(ctx, x, mw)?);
        }
        ctx.tape.max_n(&branches)
    }
}

// ---------------------------------------------------------------------------
// convolutional LSTM
// ---------------------------------------------------------------------------

/// Convolutional LSTM cell: one 3x3 convolution maps the concatenated
/// `(input, hidden)` planes to the four gate pre-activations, stacked in
/// input/forget/output/candidate order. The forget-gate bias starts at 1 so
/// early training passes state through.
#[derive(Debug, Clone)]
pub struct ConvLstmLayer {
    pub gates: Conv2dLayer,
    pub hidden: usize,
}

impl ConvLstmLayer {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        hidden: usize,
    ) -> Self {
        let gates = Conv2dLayer::new(
            reg,
            rng,
            &format!("{name}.gates"),
            c_in + hidden,
            4 * hidden,
            (3, 3),
            1,
            (1, 1),
            1,
            true,
        );
        let bias = reg.get_mut(gates.bias.unwrap());
        for i in hidden..2 * hidden {
            bias.data_mut()[i] = T::one();
        }
        ConvLstmLayer { gates, hidden }
    }

    /// One step. `state` is `(hidden, cell)` from the previous step or
    /// `None` for an all-zero initial state.
    pub fn step<T: Element>(
        &self,
        ctx: &mut ForwardCtx<T>,
        x: NodeId,
        state: Option<(NodeId, NodeId)>,
    ) -> Result<(NodeId, NodeId)> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(format!(
                "convolutional LSTM input must be (c, h, w), got {shape:?}"
            )));
        }
        let (h_prev, c_prev) = match state {
            Some(s) => s,
            None => {
                let z = ctx.tape.zeros(&[self.hidden, shape[1], shape[2]]);
                (z, ctx.tape.zeros(&[self.hidden, shape[1], shape[2]]))
            }
        };
        let z = ctx.tape.concat_channels(&[x, h_prev])?;
        let pre = self.gates.forward(ctx, z)?;
        let n = self.hidden;
        let i_pre = ctx.tape.slice_channels(pre, 0, n)?;
        let f_pre = ctx.tape.slice_channels(pre, n, 2 * n)?;
        let o_pre = ctx.tape.slice_channels(pre, 2 * n, 3 * n)?;
        let g_pre = ctx.tape.slice_channels(pre, 3 * n, 4 * n)?;
        let i = ctx.tape.sigmoid(i_pre);
        let f = ctx.tape.sigmoid(f_pre);
        let o = ctx.tape.sigmoid(o_pre);
        let g = ctx.tape.tanh(g_pre);
        let fc = ctx.tape.mul(f, c_prev)?;
        let ig = ctx.tape.mul(i, g)?;
        let c = ctx.tape.add(fc, ig)?;
        let ct = ctx.tape.tanh(c);
        let h = ctx.tape.mul(o, ct)?;
        Ok((h, c))
    }
}

// ---------------------------------------------------------------------------
// dilated-branch attention
// ---------------------------------------------------------------------------

/// Multi-dilation attention: parallel 3x3 branches with different dilation
/// rates see different neighborhood sizes; a wide convolution predicts one
/// weight plane per branch, softmax-normalized per pixel, and the output is
/// the weighted sum of the branch responses.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub branches: Vec<Conv2dLayer>,
    pub weights: Conv2dLayer,
}

impl AttentionBlock {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        dilations: &[usize],
    ) -> Self {
        let branches = dilations
            .iter()
            .map(|&d| {
                Conv2dLayer::new(
                    reg,
                    rng,
                    &format!("{name}.branch{d}"),
                    channels,
                    channels,
                    (3, 3),
                    1,
                    (d, d),
                    d,
                    true,
                )
            })
            .collect();
        let d_max = dilations.iter().copied().max().unwrap_or(1);
        let k = 2 * d_max + 1;
        let weights = Conv2dLayer::new(
            reg,
            rng,
            &format!("{name}.weights"),
            channels,
            dilations.len(),
            (k, k),
            1,
            (d_max, d_max),
            1,
            true,
        );
        AttentionBlock { branches, weights }
    }

    /// Returns `(output, weight_node)`; the weight node holds the
    /// softmax-normalized per-pixel branch weights.
    pub fn forward<T: Element>(
        &self,
        ctx: &mut ForwardCtx<T>,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            outs.push(b.forward(ctx, x)?);
        }
        let pre = self.weights.forward(ctx, x)?;
        let w = ctx.tape.softmax_channels(pre)?;
        let mut acc: Option<NodeId> = None;
        for (i, &o) in outs.iter().enumerate() {
            let wi = ctx.tape.slice_channels(w, i, i + 1)?;
            let weighted = ctx.tape.broadcast_mul_channel(o, wi)?;
            acc = Some(match acc {
                None => weighted,
                Some(a) => ctx.tape.add(a, weighted)?,
            });
        }
        Ok((acc.unwrap(), w))
    }
}

// ---------------------------------------------------------------------------
// decoder blocks
// ---------------------------------------------------------------------------

/// Doubles the spatial extents: a stride-2 transposed convolution plus a
/// skip path of bilinear upsampling followed by a 1x1 channel projection.
#[derive(Debug, Clone)]
pub struct ResidualUpsample {
    pub tconv_weight: ParamId,
    pub tconv_bias: ParamId,
    pub proj: Conv2dLayer,
}

impl ResidualUpsample {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        ResidualUpsample {
            tconv_weight: reg.add(
                format!("{name}.tconv.weight"),
                he_uniform(rng, &[c_in, c_out, 4, 4], c_in * 4 * 4),
                true,
            ),
            tconv_bias: reg.add(format!("{name}.tconv.bias"), GridTensor::zeros(&[c_out]), true),
            proj: Conv2dLayer::new(
                reg,
                rng,
                &format!("{name}.proj"),
                c_in,
                c_out,
                (1, 1),
                1,
                (0, 0),
                1,
                true,
            ),
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut ForwardCtx<T>, x: NodeId) -> Result<NodeId> {
        let w = ctx.param(self.tconv_weight);
        let b = ctx.param(self.tconv_bias);
        let main = ctx.tape.conv_transpose2d(x, w, Some(b), 2, (1, 1))?;
        let up = ctx.tape.bilinear_upsample2x(x)?;
        let skip = self.proj.forward(ctx, up)?;
        ctx.tape.add(main, skip)
    }
}

/// Inception-style residual block: parallel 1x1, 7x1, 1x7 and 3x3 branches
/// (each to a quarter of the width), concatenated, projected back with a 1x1
/// convolution, added to the input and rectified.
#[derive(Debug, Clone)]
pub struct InceptionResidual {
    pub branches: Vec<Conv2dLayer>,
    pub proj: Conv2dLayer,
}

impl InceptionResidual {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let bc = (channels / 4).max(1);
        let specs: [((usize, usize), (usize, usize)); 4] =
            [((1, 1), (0, 0)), ((7, 1), (3, 0)), ((1, 7), (0, 3)), ((3, 3), (1, 1))];
        let branches = specs
            .iter()
            .enumerate()
            .map(|(i, &(k, p))| {
                Conv2dLayer::new(reg, rng, &format!("{name}.b{i}"), channels, bc, k, 1, p, 1, true)
            })
            .collect();
        let proj = Conv2dLayer::new(
            reg,
            rng,
            &format!("{name}.proj"),
            4 * bc,
            channels,
            (1, 1),
            1,
            (0, 0),
            1,
            true,
        );
        InceptionResidual { branches, proj }
    }

    pub fn forward<T: Element>(&self, ctx: &mut ForwardCtx<T>, x: NodeId) -> Result<NodeId> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            outs.push(b.forward(ctx, x)?);
        }
        let cat = ctx.tape.concat_channels(&outs)?;
        let p = self.proj.forward(ctx, cat)?;
        let s = ctx.tape.add(p, x)?;
        Ok(ctx.tape.relu(s))
    }
}
