//! TDNN speaker encoder: a strided input convolution, three dilated
//! SE-Res2Blocks whose outputs are concatenated into a pointwise
//! aggregation convolution, channel- and context-dependent attentive
//! statistics pooling, and a final fully connected projection.
//!
//! Feature maps are `[channels, batch, time]`; embeddings come out as
//! `[batch, embedding_dim]` rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv1dSpec, Graph, StatUpdate, Var};
use crate::error::{Error, Result};
use crate::features::LogMelFeatures;
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub channels: usize,
    pub embedding_dim: usize,
    pub res2net_scale: usize,
    /// SE bottleneck width; `None` means `channels / 8`.
    pub se_bottleneck: Option<usize>,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    pub block_kernel: usize,
    pub dilations: Vec<usize>,
    /// Width of the aggregation convolution; `None` means `3 * channels / 2`.
    pub conv5_channels: Option<usize>,
    pub conv5_stride: usize,
    pub attention_bottleneck: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            channels: 256,
            embedding_dim: 64,
            res2net_scale: 8,
            se_bottleneck: None,
            conv1_kernel: 5,
            conv1_stride: 2,
            block_kernel: 3,
            dilations: vec![2, 3, 4],
            conv5_channels: None,
            conv5_stride: 1,
            attention_bottleneck: 128,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    /// The full-size network: 1024 channels, 1536-wide aggregation, 192-d
    /// embeddings.
    pub fn paper_scale() -> Self {
        Self {
            channels: 1024,
            embedding_dim: 192,
            ..Self::default()
        }
    }

    /// A tiny network for gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_mels: 80,
            channels: 16,
            embedding_dim: 8,
            res2net_scale: 4,
            attention_bottleneck: 8,
            ..Self::default()
        }
    }

    pub fn se_width(&self) -> usize {
        self.se_bottleneck.unwrap_or(self.channels / 8).max(1)
    }

    pub fn conv5_width(&self) -> usize {
        self.conv5_channels.unwrap_or(3 * self.channels / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.res2net_scale == 0 || self.channels % self.res2net_scale != 0 {
            return bad(format!(
                "channels ({}) must be a positive multiple of res2net_scale ({})",
                self.channels, self.res2net_scale
            ));
        }
        if self.res2net_scale < 2 {
            return bad("res2net_scale must be at least 2".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if self.dilations.len() != 3 {
            return bad(format!(
                "exactly three SE-Res2Blocks are required, got {} dilations",
                self.dilations.len()
            ));
        }
        if self.conv1_kernel % 2 == 0 || self.block_kernel % 2 == 0 {
            return bad("kernel sizes must be odd".into());
        }
        if self.conv1_stride == 0 || self.conv5_stride == 0 || self.dilations.contains(&0) {
            return bad("strides and dilations must be positive".into());
        }
        if self.conv5_width() == 0 || self.attention_bottleneck == 0 || self.n_mels == 0 {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    /// Input frames required so that the first convolution sees at least one
    /// unpadded window.
    pub fn min_frames(&self) -> usize {
        self.conv1_kernel
    }

    fn conv1_spec(&self) -> Conv1dSpec {
        Conv1dSpec {
            stride: self.conv1_stride,
            dilation: 1,
            padding: self.conv1_kernel / 2,
        }
    }

    fn block_spec(&self, dilation: usize) -> Conv1dSpec {
        Conv1dSpec {
            stride: 1,
            dilation,
            padding: dilation * (self.block_kernel / 2),
        }
    }

    fn conv5_spec(&self) -> Conv1dSpec {
        Conv1dSpec {
            stride: self.conv5_stride,
            dilation: 1,
            padding: 0,
        }
    }

    /// Per-layer `(channels, time)` shapes for an input of `frames` frames.
    pub fn shape_trace(&self, frames: usize) -> Result<Vec<LayerShape>> {
        self.validate()?;
        if frames < self.min_frames() {
            return Err(Error::TooFewFrames {
                frames,
                min_frames: self.min_frames(),
            });
        }
        let c = self.channels;
        let t1 = self.conv1_spec().output_len(frames, self.conv1_kernel).unwrap_or(0);
        let mut rows = vec![LayerShape::new("conv1", (self.n_mels, frames), (c, t1))];
        let mut t = t1;
        for (i, &d) in self.dilations.iter().enumerate() {
            let out = self.block_spec(d).output_len(t, self.block_kernel).unwrap_or(0);
            rows.push(LayerShape::new(&format!("block{}", i + 1), (c, t), (c, out)));
            t = out;
        }
        let t5 = self.conv5_spec().output_len(t, 1).unwrap_or(0);
        rows.push(LayerShape::new("conv5", (3 * c, t), (self.conv5_width(), t5)));
        rows.push(LayerShape::new("pool", (self.conv5_width(), t5), (2 * self.conv5_width(), 1)));
        rows.push(LayerShape::new("fc", (2 * self.conv5_width(), 1), (self.embedding_dim, 1)));
        Ok(rows)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub input: (usize, usize),
    pub output: (usize, usize),
}

impl LayerShape {
    fn new(name: &str, input: (usize, usize), output: (usize, usize)) -> Self {
        Self {
            name: name.to_string(),
            input,
            output,
        }
    }
}

/// An utterance-level speaker embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn expand_channels(g: &mut Graph, v: Var, like: &[usize]) -> Var {
    let inner: usize = like[1..].iter().product();
    let e = g.expand_inner(v, inner);
    g.reshape(e, like)
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            eps,
            momentum,
        }
    }

    /// Normalises a `[channels, ...]` tensor per channel.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let shape = g.shape(x).to_vec();
        let xhat = match mode {
            Mode::Train => {
                let (xhat, mean, var) = g.normalize(x, None, self.eps);
                let n = (g.value(x).len() / shape[0]) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                g.push_stat_update(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean: mean,
                    batch_var: var.iter().map(|v| v * unbiased).collect(),
                });
                xhat
            }
            Mode::Eval => {
                let (m, v) = (store.value(self.running_mean), store.value(self.running_var));
                g.normalize(x, Some((m.data(), v.data())), self.eps).0
            }
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let ge = expand_channels(g, gamma, &shape);
        let be = expand_channels(g, beta, &shape);
        let scaled = g.mul(xhat, ge);
        g.add(scaled, be)
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }
}

/// Folds train-mode batch statistics into running averages.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate], momentum: f64) {
    for u in updates {
        for (r, b) in store.value_mut(u.running_mean).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in store.value_mut(u.running_var).data_mut().iter_mut().zip(&u.batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv1dSpec,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv1dSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(&[cout, cin, kernel], cin * kernel, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        Self { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.conv1d(x, w, self.spec);
        match self.bias {
            Some(b) => {
                let shape = g.shape(y).to_vec();
                let bv = g.param(store, b);
                let be = expand_channels(g, bv, &shape);
                g.add(y, be)
            }
            None => y,
        }
    }
}

/// Convolution, ReLU, batch norm.
#[derive(Clone, Debug)]
pub struct TdnnLayer {
    pub conv: Conv1d,
    pub bn: BatchNorm,
}

impl TdnnLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv1dSpec,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv1d::new(store, &format!("{name}.conv"), cin, cout, kernel, spec, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout, cfg.bn_eps, cfg.bn_momentum),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = g.relu(y);
        self.bn.forward(g, store, y, mode)
    }
}

/// The multi-scale Res2 convolution: channel groups processed
/// hierarchically, each group receiving the previous group's output.
#[derive(Clone, Debug)]
pub struct Res2Conv {
    pub scale: usize,
    pub layers: Vec<TdnnLayer>,
}

impl Res2Conv {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let width = g.shape(x)[0] / self.scale;
        let mut outs = Vec::with_capacity(self.scale);
        let mut prev: Option<Var> = None;
        for i in 0..self.scale {
            let xi = g.narrow(x, 0, i * width, width);
            let yi = if i == 0 {
                xi
            } else {
                let inp = match prev {
                    Some(p) if i > 1 => g.add(xi, p),
                    _ => xi,
                };
                self.layers[i - 1].forward(g, store, inp, mode)
            };
            prev = Some(yi);
            outs.push(yi);
        }
        g.concat(&outs, 0)
    }
}

#[derive(Clone, Debug)]
pub struct SqueezeExcitation {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

impl SqueezeExcitation {
    /// Per-utterance channel gates in `(0, 1)`, shape `[channels, batch]`.
    pub fn gates(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let batch = g.shape(x)[1];
        let s = g.mean_last(x);
        let w1 = g.param(store, self.fc1_weight);
        let b1 = g.param(store, self.fc1_bias);
        let z = g.matmul(w1, s);
        let b1e = g.expand_inner(b1, batch);
        let z = g.add(z, b1e);
        let z = g.relu(z);
        let w2 = g.param(store, self.fc2_weight);
        let b2 = g.param(store, self.fc2_bias);
        let e = g.matmul(w2, z);
        let b2e = g.expand_inner(b2, batch);
        let e = g.add(e, b2e);
        g.sigmoid(e)
    }
}

/// How the squeeze-excitation gate is applied; `Bypass` multiplies by one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeGate {
    Learned,
    Bypass,
}

#[derive(Clone, Debug)]
pub struct SeRes2Block {
    pub channels: usize,
    pub conv_in: TdnnLayer,
    pub res2: Res2Conv,
    pub conv_out: TdnnLayer,
    pub se: SqueezeExcitation,
}

impl SeRes2Block {
    fn new(store: &mut ParamStore, name: &str, dilation: usize, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let width = c / cfg.res2net_scale;
        let pw = Conv1dSpec {
            stride: 1,
            dilation: 1,
            padding: 0,
        };
        let conv_in = TdnnLayer::new(store, &format!("{name}.conv_in"), c, c, 1, pw, cfg, rng);
        let layers = (1..cfg.res2net_scale)
            .map(|i| {
                TdnnLayer::new(
                    store,
                    &format!("{name}.res2.{i}"),
                    width,
                    width,
                    cfg.block_kernel,
                    cfg.block_spec(dilation),
                    cfg,
                    rng,
                )
            })
            .collect();
        let conv_out = TdnnLayer::new(store, &format!("{name}.conv_out"), c, c, 1, pw, cfg, rng);
        let bn = cfg.se_width();
        let se = SqueezeExcitation {
            fc1_weight: store.add(format!("{name}.se.fc1.weight"), uniform_fan_in(&[bn, c], c, rng), true),
            fc1_bias: store.add(format!("{name}.se.fc1.bias"), Tensor::zeros(&[bn]), true),
            fc2_weight: store.add(format!("{name}.se.fc2.weight"), uniform_fan_in(&[c, bn], bn, rng), true),
            fc2_bias: store.add(format!("{name}.se.fc2.bias"), Tensor::zeros(&[c]), true),
        };
        Self {
            channels: c,
            conv_in,
            res2: Res2Conv {
                scale: cfg.res2net_scale,
                layers,
            },
            conv_out,
            se,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode, gate: SeGate) -> Result<Var> {
        let c = g.shape(x)[0];
        if c != self.channels {
            return Err(Error::Shape(format!(
                "SE-Res2Block expects {} channels, got {c}",
                self.channels
            )));
        }
        let h = self.conv_in.forward(g, store, x, mode);
        let h = self.res2.forward(g, store, h, mode);
        let h = self.conv_out.forward(g, store, h, mode);
        let h = match gate {
            SeGate::Learned => {
                let shape = g.shape(h).to_vec();
                let s = self.se.gates(g, store, h);
                let se = g.expand_inner(s, shape[2]);
                g.mul(h, se)
            }
            SeGate::Bypass => h,
        };
        Ok(g.add(h, x))
    }
}

/// Attention-weighted mean and standard deviation over time. `h` and
/// `weights` are `[channels, batch, time]` with weights summing to one over
/// time; the result is `[2 * channels, batch]`.
pub fn weighted_stats(g: &mut Graph, h: Var, weights: Var) -> Var {
    let wh = g.mul(weights, h);
    let mu = g.sum_last(wh);
    let h2 = g.square(h);
    let wh2 = g.mul(weights, h2);
    let m2 = g.sum_last(wh2);
    let mu2 = g.square(mu);
    let var = g.sub(m2, mu2);
    let sd = g.sqrt_floor(var, VARIANCE_FLOOR);
    g.concat(&[mu, sd], 0)
}

#[derive(Clone, Debug)]
pub struct AttentiveStatsPool {
    pub attention: TdnnLayer,
    pub score: Conv1d,
}

impl AttentiveStatsPool {
    /// Per-channel attention weights over time, conditioned on each frame and
    /// on the utterance's global mean and standard deviation.
    pub fn attention_weights(&self, g: &mut Graph, store: &ParamStore, h: Var, mode: Mode) -> Var {
        let shape = g.shape(h).to_vec();
        let t = shape[2];
        let uniform = g.constant(Tensor::full(&shape, 1.0 / t as f64));
        let stats = weighted_stats(g, h, uniform);
        let c = shape[0];
        let mean = g.narrow(stats, 0, 0, c);
        let sd = g.narrow(stats, 0, c, c);
        let mean_t = g.expand_inner(mean, t);
        let sd_t = g.expand_inner(sd, t);
        let ctx = g.concat(&[h, mean_t, sd_t], 0);
        let a = self.attention.forward(g, store, ctx, mode);
        let a = g.tanh(a);
        let e = self.score.forward(g, store, a);
        g.softmax_last(e)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, mode: Mode) -> Var {
        let w = self.attention_weights(g, store, h, mode);
        weighted_stats(g, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub conv1: TdnnLayer,
    pub blocks: Vec<SeRes2Block>,
    pub conv5: TdnnLayer,
    pub pool: AttentiveStatsPool,
    pub pool_bn: BatchNorm,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl Encoder {
    /// Registers all encoder parameters under `encoder.*`.
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let c = cfg.channels;
        let c5 = cfg.conv5_width();
        let conv1 = TdnnLayer::new(store, "encoder.conv1", cfg.n_mels, c, cfg.conv1_kernel, cfg.conv1_spec(), cfg, rng);
        let blocks = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| SeRes2Block::new(store, &format!("encoder.block{}", i + 1), d, cfg, rng))
            .collect();
        let conv5 = TdnnLayer::new(store, "encoder.conv5", 3 * c, c5, 1, cfg.conv5_spec(), cfg, rng);
        let pw = Conv1dSpec {
            stride: 1,
            dilation: 1,
            padding: 0,
        };
        let a = cfg.attention_bottleneck;
        let pool = AttentiveStatsPool {
            attention: TdnnLayer::new(store, "encoder.pool.attention", 3 * c5, a, 1, pw, cfg, rng),
            score: Conv1d::new(store, "encoder.pool.score", a, c5, 1, pw, true, rng),
        };
        let pool_bn = BatchNorm::new(store, "encoder.pool_bn", 2 * c5, cfg.bn_eps, cfg.bn_momentum);
        let fc_weight = store.add(
            "encoder.fc.weight",
            uniform_fan_in(&[cfg.embedding_dim, 2 * c5], 2 * c5, rng),
            true,
        );
        let fc_bias = store.add("encoder.fc.bias", Tensor::zeros(&[cfg.embedding_dim]), true);
        Ok(Self {
            config,
            conv1,
            blocks,
            conv5,
            pool,
            pool_bn,
            fc_weight,
            fc_bias,
        })
    }

    /// Packs equal-length feature matrices into a `[n_mels, batch, T]` input.
    pub fn batch_input(&self, batch: &[&LogMelFeatures]) -> Result<Tensor> {
        let Some(first) = batch.first() else {
            return Err(Error::InvalidInput("empty batch".into()));
        };
        let (n_mels, t) = (first.n_mels(), first.frames());
        if n_mels != self.config.n_mels {
            return Err(Error::Shape(format!(
                "features have {n_mels} mel bins, encoder expects {}",
                self.config.n_mels
            )));
        }
        if t < self.config.min_frames() {
            return Err(Error::TooFewFrames {
                frames: t,
                min_frames: self.config.min_frames(),
            });
        }
        if batch.iter().any(|f| f.n_mels() != n_mels || f.frames() != t) {
            return Err(Error::Shape("all features in a batch must share n_mels x T".into()));
        }
        let b = batch.len();
        let mut data = vec![0.0; n_mels * b * t];
        for (bi, f) in batch.iter().enumerate() {
            for m in 0..n_mels {
                data[(m * b + bi) * t..(m * b + bi + 1) * t].copy_from_slice(f.row(m));
            }
        }
        Ok(Tensor::from_vec(&[n_mels, b, t], data))
    }

    /// Embeds a batch; returns a `[batch, embedding_dim]` node.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &[&LogMelFeatures], mode: Mode) -> Result<Var> {
        let x = self.batch_input(batch)?;
        let x = g.constant(x);
        self.forward_input(g, store, x, mode, None)
    }

    /// As [`Encoder::forward`], also recording the `[channels, time]` shape
    /// after each stage.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&LogMelFeatures],
        mode: Mode,
    ) -> Result<(Var, Vec<LayerShape>)> {
        let x = self.batch_input(batch)?;
        let x = g.constant(x);
        let mut trace = Vec::new();
        let out = self.forward_input(g, store, x, mode, Some(&mut trace))?;
        Ok((out, trace))
    }

    pub(crate) fn forward_input(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        mut trace: Option<&mut Vec<LayerShape>>,
    ) -> Result<Var> {
        let ct = |g: &Graph, v: Var| {
            let s = g.shape(v);
            (s[0], if s.len() == 3 { s[2] } else { 1 })
        };
        let mut record = |name: &str, input: (usize, usize), output: (usize, usize)| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(LayerShape::new(name, input, output));
            }
        };
        let h0 = self.conv1.forward(g, store, x, mode);
        record("conv1", ct(g, x), ct(g, h0));
        let mut h = h0;
        let mut outs = Vec::with_capacity(3);
        for (i, block) in self.blocks.iter().enumerate() {
            let o = block.forward(g, store, h, mode, SeGate::Learned)?;
            record(&format!("block{}", i + 1), ct(g, h), ct(g, o));
            outs.push(o);
            h = o;
        }
        let cat = g.concat(&outs, 0);
        let h5 = self.conv5.forward(g, store, cat, mode);
        record("conv5", ct(g, cat), ct(g, h5));
        let pooled = self.pool.forward(g, store, h5, mode);
        record("pool", ct(g, h5), ct(g, pooled));
        let pooled_n = self.pool_bn.forward(g, store, pooled, mode);
        let batch = g.shape(pooled)[1];
        let w = g.param(store, self.fc_weight);
        let b = g.param(store, self.fc_bias);
        let y = g.matmul(w, pooled_n);
        let be = g.expand_inner(b, batch);
        let y = g.add(y, be);
        record("fc", ct(g, pooled), ct(g, y));
        Ok(g.transpose(y))
    }

    /// Eval-mode embedding of a single utterance.
    pub fn embed(&self, store: &ParamStore, features: &LogMelFeatures) -> Result<SpeakerEmbedding> {
        let mut g = Graph::new();
        let e = self.forward(&mut g, store, &[features], Mode::Eval)?;
        Ok(SpeakerEmbedding::new(g.value(e).data().to_vec()))
    }

    /// Eval-mode embeddings of several utterances of any lengths; equal
    /// lengths are batched together.
    pub fn embed_many(&self, store: &ParamStore, features: &[&LogMelFeatures]) -> Result<Vec<SpeakerEmbedding>> {
        let mut out = vec![None; features.len()];
        let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, f) in features.iter().enumerate() {
            by_len.entry(f.frames()).or_default().push(i);
        }
        for idx in by_len.values() {
            for chunk in idx.chunks(32) {
                let batch: Vec<&LogMelFeatures> = chunk.iter().map(|&i| features[i]).collect();
                let mut g = Graph::new();
                let e = self.forward(&mut g, store, &batch, Mode::Eval)?;
                for (r, &i) in chunk.iter().enumerate() {
                    out[i] = Some(SpeakerEmbedding::new(g.value(e).row(r).to_vec()));
                }
            }
        }
        Ok(out.into_iter().map(|e| e.expect("every clip embedded")).collect())
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut v = vec![&self.conv1.bn];
        for b in &self.blocks {
            v.push(&b.conv_in.bn);
            v.extend(b.res2.layers.iter().map(|l| &l.bn));
            v.push(&b.conv_out.bn);
        }
        v.push(&self.conv5.bn);
        v.push(&self.pool.attention.bn);
        v.push(&self.pool_bn);
        v
    }
}
