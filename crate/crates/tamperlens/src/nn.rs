//! Neural-network building blocks over the autodiff graph: linear and
//! convolution layers, normalization, multi-head self-attention, transformer
//! encoder blocks, and an SGD-with-momentum optimizer.
//!
//! Layers own their [`Param`]s; a forward pass borrows the layer immutably
//! and records operations on a [`Graph`]. Parameter traversal goes through
//! [`Layer::collect_params`] so optimizers and checkpoints can enumerate
//! every tensor without knowing the module tree.

use std::collections::HashMap;

use ndarray::{Array1, Array3, Array4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Arr, Gradients, Graph, Param, V};

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    /// Normal with `std = sqrt(2 / fan_in)`, suited to ReLU stacks.
    HeNormal,
    /// Normal with the given standard deviation.
    Normal(f64),
    Zeros,
}

fn init_tensor<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    init: Init,
) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::XavierUniform => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        }
        Init::HeNormal => {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Zeros => vec![0.0; n],
    };
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Anything that owns parameters.
pub trait Layer {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>);
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);

    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        self.collect_params(&mut v);
        v
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully-connected layer: `[S, in] -> [S, out]`, weights stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        Linear {
            w: Param::new(
                format!("{name}.w"),
                init_tensor(rng, &[in_dim, out_dim], in_dim, out_dim, init),
            ),
            b: Param::new(format!("{name}.b"), Arr::zeros(IxDyn(&[out_dim]))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: V) -> V {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let h = g.matmul(x, w);
        g.add_bias_rows(h, b)
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape()[1]
    }
}

impl Layer for Linear {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.w);
        out.push(&self.b);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// Standard 2-D convolution layer (`[B, C, H, W]` tensors, zero padding).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        Conv2d {
            w: Param::new(
                format!("{name}.w"),
                init_tensor(rng, &[out_ch, in_ch, k, k], fan_in, out_ch * k * k, Init::HeNormal),
            ),
            b: Param::new(format!("{name}.b"), Arr::zeros(IxDyn(&[out_ch]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: V) -> V {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.w.value.shape()[0]
    }
}

impl Layer for Conv2d {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.w);
        out.push(&self.b);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

/// First-layer convolution whose kernels are projected after every optimizer
/// step so each 2-D slice has a center tap of −1 and off-center taps summing
/// to 1 — a high-pass prediction-error filter that suppresses scene content.
#[derive(Debug, Clone)]
pub struct ConstrainedConv2d {
    pub conv: Conv2d,
}

impl ConstrainedConv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    ) -> Self {
        assert!(k % 2 == 1 && k >= 3, "constrained kernels need an odd size >= 3");
        let mut conv = Conv2d::new(rng, name, in_ch, out_ch, k, 1, k / 2);
        // Bias would let the layer cancel the constraint's zero-DC property.
        conv.b.trainable = false;
        let mut layer = ConstrainedConv2d { conv };
        layer.project();
        layer
    }

    pub fn forward(&self, g: &mut Graph, x: V) -> V {
        self.conv.forward(g, x)
    }

    /// Re-imposes the kernel constraint in place.
    pub fn project(&mut self) {
        let w = self.conv.w.value_mut();
        let shape: Vec<usize> = w.shape().to_vec();
        let (out_ch, in_ch, k) = (shape[0], shape[1], shape[2]);
        let c = k / 2;
        for o in 0..out_ch {
            for i in 0..in_ch {
                let mut sum = 0.0;
                for r in 0..k {
                    for s in 0..k {
                        if r != c || s != c {
                            sum += w[[o, i, r, s]];
                        }
                    }
                }
                let off_count = (k * k - 1) as f64;
                for r in 0..k {
                    for s in 0..k {
                        if r == c && s == c {
                            w[[o, i, r, s]] = -1.0;
                        } else if sum.abs() < 1e-6 {
                            w[[o, i, r, s]] = 1.0 / off_count;
                        } else {
                            w[[o, i, r, s]] /= sum;
                        }
                    }
                }
            }
        }
    }

    /// True when every kernel slice satisfies the constraint within `tol`.
    pub fn constraint_holds(&self, tol: f64) -> bool {
        let w = &self.conv.w.value;
        let shape = w.shape();
        let (out_ch, in_ch, k) = (shape[0], shape[1], shape[2]);
        let c = k / 2;
        for o in 0..out_ch {
            for i in 0..in_ch {
                if (w[[o, i, c, c]] + 1.0).abs() > tol {
                    return false;
                }
                let mut sum = 0.0;
                for r in 0..k {
                    for s in 0..k {
                        if r != c || s != c {
                            sum += w[[o, i, r, s]];
                        }
                    }
                }
                if (sum - 1.0).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

impl Layer for ConstrainedConv2d {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.conv.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv.collect_params_mut(out);
    }
}

/// Depthwise-separable convolution: per-channel spatial filter followed by a
/// 1×1 pointwise mix.
#[derive(Debug, Clone)]
pub struct SeparableConv2d {
    pub dw_w: Param,
    pub dw_b: Param,
    pub pointwise: Conv2d,
    pub stride: usize,
    pub pad: usize,
}

impl SeparableConv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        SeparableConv2d {
            dw_w: Param::new(
                format!("{name}.dw.w"),
                init_tensor(rng, &[in_ch, k, k], k * k, k * k, Init::HeNormal),
            ),
            dw_b: Param::new(format!("{name}.dw.b"), Arr::zeros(IxDyn(&[in_ch]))),
            pointwise: Conv2d::new(rng, &format!("{name}.pw"), in_ch, out_ch, 1, 1, 0),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: V) -> V {
        let w = g.param(&self.dw_w);
        let b = g.param(&self.dw_b);
        let mid = g.depthwise_conv2d(x, w, b, self.stride, self.pad);
        self.pointwise.forward(g, mid)
    }
}

impl Layer for SeparableConv2d {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.dw_w);
        out.push(&self.dw_b);
        self.pointwise.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.dw_w);
        out.push(&mut self.dw_b);
        self.pointwise.collect_params_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Batch normalization over `[B, C, H, W]` with running inference statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), Arr::ones(IxDyn(&[channels]))),
            beta: Param::new(format!("{name}.beta"), Arr::zeros(IxDyn(&[channels]))),
            running_mean: Param::buffer(format!("{name}.rmean"), Arr::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(format!("{name}.rvar"), Arr::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: V, training: bool) -> V {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.batch_norm2d(
            x,
            gamma,
            beta,
            &self.running_mean,
            &self.running_var,
            training,
            self.momentum,
            self.eps,
        )
    }

    /// Overwrites the running buffers with the exact batch statistics behind
    /// a train-mode forward's stat updates, inverting the momentum blend
    /// `new = (1−m)·old + m·batch`. Updates belonging to other layers are
    /// ignored, so one drained update map can calibrate a whole trunk.
    pub fn calibrate_from_updates(&mut self, updates: &HashMap<u64, Arr>) {
        let m = self.momentum;
        for buf in [&mut self.running_mean, &mut self.running_var] {
            if let Some(blended) = updates.get(&buf.id()) {
                let kept = &*buf.value * (1.0 - m);
                buf.set_value((blended - &kept) / m);
            }
        }
    }
}

impl Layer for BatchNorm2d {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.gamma);
        out.push(&self.beta);
        out.push(&self.running_mean);
        out.push(&self.running_var);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
        out.push(&mut self.running_mean);
        out.push(&mut self.running_var);
    }
}

/// Layer normalization over the last axis of `[S, D]` rows.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), Arr::ones(IxDyn(&[dim]))),
            beta: Param::new(format!("{name}.beta"), Arr::zeros(IxDyn(&[dim]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: V) -> V {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm_rows(x, gamma, beta, self.eps)
    }
}

impl Layer for LayerNorm {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product self-attention over `[S, D]` sequences.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "attention dim must divide evenly across heads");
        MultiHeadAttention {
            wq: Linear::new(rng, &format!("{name}.wq"), dim, dim, Init::XavierUniform),
            wk: Linear::new(rng, &format!("{name}.wk"), dim, dim, Init::XavierUniform),
            wv: Linear::new(rng, &format!("{name}.wv"), dim, dim, Init::XavierUniform),
            wo: Linear::new(rng, &format!("{name}.wo"), dim, dim, Init::XavierUniform),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: V) -> V {
        let dim = self.wq.out_dim();
        let dh = dim / self.heads;
        let q = self.wq.forward(g, x);
        let k = self.wk.forward(g, x);
        let v = self.wv.forward(g, x);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scaled = g.scale(scores, scale);
            let attn = g.softmax_rows(scaled);
            head_outputs.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(&head_outputs);
        self.wo.forward(g, merged)
    }
}

impl Layer for MultiHeadAttention {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.wq.collect_params(out);
        self.wk.collect_params(out);
        self.wv.collect_params(out);
        self.wo.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.wq.collect_params_mut(out);
        self.wk.collect_params_mut(out);
        self.wv.collect_params_mut(out);
        self.wo.collect_params_mut(out);
    }
}

/// Pre-normalization transformer encoder block:
/// `x + attn(norm(x))`, then `+ ffn(norm(·))` with a ReLU feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Self {
        EncoderBlock {
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim),
            ff1: Linear::new(rng, &format!("{name}.ff1"), dim, ff_dim, Init::XavierUniform),
            ff2: Linear::new(rng, &format!("{name}.ff2"), ff_dim, dim, Init::XavierUniform),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: V) -> V {
        let n1 = self.norm1.forward(g, x);
        let a = self.attn.forward(g, n1);
        let x1 = g.add(x, a);
        let n2 = self.norm2.forward(g, x1);
        let h = self.ff1.forward(g, n2);
        let h = g.relu(h);
        let f = self.ff2.forward(g, h);
        g.add(x1, f)
    }
}

impl Layer for EncoderBlock {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.norm1.collect_params(out);
        self.attn.collect_params(out);
        self.norm2.collect_params(out);
        self.ff1.collect_params(out);
        self.ff2.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.norm1.collect_params_mut(out);
        self.attn.collect_params_mut(out);
        self.norm2.collect_params_mut(out);
        self.ff1.collect_params_mut(out);
        self.ff2.collect_params_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Stochastic gradient descent with classical momentum:
/// `v <- momentum*v + grad; w <- w - lr*mult*v`.
///
/// Velocity buffers are keyed by parameter id and live only for the
/// optimizer's lifetime; a resumed run restarts momentum from zero.
pub struct Sgd {
    pub momentum: f64,
    velocity: HashMap<u64, Arr>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: HashMap::new() }
    }

    /// Applies one update. `params` pairs each parameter with a learning-rate
    /// multiplier; a multiplier of 0 freezes the parameter (its velocity is
    /// left untouched). Non-trainable buffers and parameters without a
    /// gradient are skipped.
    pub fn step(&mut self, lr: f64, params: &mut [(&mut Param, f64)], grads: &Gradients) {
        for (p, mult) in params.iter_mut() {
            if !p.trainable || *mult == 0.0 {
                continue;
            }
            let Some(grad) = grads.get(p) else { continue };
            let vel = self
                .velocity
                .entry(p.id())
                .or_insert_with(|| Arr::zeros(grad.raw_dim()));
            *vel *= self.momentum;
            *vel += grad;
            let effective = lr * *mult;
            let w = p.value_mut();
            ndarray::Zip::from(&mut *w).and(&*vel).for_each(|wv, &vv| {
                *wv -= effective * vv;
            });
        }
    }
}

/// Applies deferred batch-statistics updates produced during a training
/// forward pass to the matching buffers.
pub fn apply_stat_updates(updates: Vec<crate::autograd::StatUpdate>, params: &mut [&mut Param]) {
    let mut by_id: HashMap<u64, Arr> = updates
        .into_iter()
        .map(|u| (u.param_id, u.new_value))
        .collect();
    for p in params.iter_mut() {
        if let Some(v) = by_id.remove(&p.id()) {
            p.set_value(v);
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor helpers shared by model code
// ---------------------------------------------------------------------------

/// Stacks `[C, H, W]` blocks into a `[B, C, H, W]` batch tensor.
pub fn stack_blocks(blocks: &[Array3<f64>]) -> Array4<f64> {
    assert!(!blocks.is_empty());
    let (c, h, w) = blocks[0].dim();
    let mut out = Array4::<f64>::zeros((blocks.len(), c, h, w));
    for (i, b) in blocks.iter().enumerate() {
        assert_eq!(b.dim(), (c, h, w), "inconsistent block shapes");
        out.index_axis_mut(ndarray::Axis(0), i).assign(b);
    }
    out
}

/// Per-row 1-D view of a `[S]` vector as `Array1`.
pub fn to_vec1(a: &Arr) -> Array1<f64> {
    a.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned()
}
