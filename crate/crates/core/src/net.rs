//! Hybrid residual networks: a full-precision stem, quantized residual blocks
//! up to the split point, full-precision blocks after it, and early-exit
//! classifiers tapped off the edge section.
//!
//! Layer numbering is 1-based. Layer 1 is the stem convolution; layer `l >= 2`
//! is residual block `l - 1`. An exit "at layer l" reads the output of layer
//! `l` (after the residual addition).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{self, BnCache, BnMode, RunningStats};
use crate::quant::{self, QuantParams, FULL_PRECISION, SUPPORTED_BITS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HybridNetConfig {
    /// Total layer count `N` (stem plus `N - 1` residual blocks).
    pub n_layers: usize,
    /// Split point `M`: layers `1..=M` run on the edge.
    pub split_point: usize,
    pub edge_bits: u8,
    pub cloud_bits: u8,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel count of each stage; later stages halve the resolution.
    pub stage_widths: Vec<usize>,
    pub exit_locations: Vec<usize>,
    pub num_classes: usize,
    /// Entropy threshold per early exit.
    pub thresholds: Vec<f64>,
    /// Loss weight per exit, final exit last.
    pub lambdas: Vec<f64>,
}

impl HybridNetConfig {
    /// Desk-scale defaults: one early exit at the split point, `0.6` of the
    /// joint loss on it, entropy threshold `0.5`.
    pub fn desk(n_layers: usize, split_point: usize, edge_bits: u8) -> Self {
        Self {
            n_layers,
            split_point,
            edge_bits,
            cloud_bits: FULL_PRECISION,
            in_channels: 1,
            height: 28,
            width: 28,
            stage_widths: vec![16, 32, 64],
            exit_locations: vec![split_point],
            num_classes: 10,
            thresholds: vec![0.5],
            lambdas: vec![0.6, 0.4],
        }
    }

    /// Replace the exits, spreading `early_lambda` evenly over them.
    pub fn with_exits(mut self, locations: Vec<usize>, early_lambda: f64, threshold: f64) -> Self {
        let k = locations.len();
        self.thresholds = vec![threshold; k];
        self.lambdas = if k == 0 {
            vec![1.0]
        } else {
            let mut l = vec![early_lambda / k as f64; k];
            l.push(1.0 - early_lambda);
            l
        };
        self.exit_locations = locations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.n_layers < 2 {
            return cfg_err(format!("need at least 2 layers, got {}", self.n_layers));
        }
        if self.split_point < 1 || self.split_point >= self.n_layers {
            return cfg_err(format!(
                "split point {} must satisfy 1 <= M < N = {}",
                self.split_point, self.n_layers
            ));
        }
        if !SUPPORTED_BITS.contains(&self.edge_bits) && self.edge_bits != FULL_PRECISION {
            return cfg_err(format!("edge bit-depth {} not supported", self.edge_bits));
        }
        if self.cloud_bits != FULL_PRECISION {
            return cfg_err(format!("cloud layers must be {FULL_PRECISION}-bit, got {}", self.cloud_bits));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return cfg_err("input dims must be positive".into());
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return cfg_err("stage widths must be non-empty and positive".into());
        }
        if self.num_classes < 2 {
            return cfg_err("need at least 2 classes".into());
        }
        for pair in self.exit_locations.windows(2) {
            if pair[0] >= pair[1] {
                return cfg_err(format!("exit locations must be strictly increasing: {:?}", self.exit_locations));
            }
        }
        if let Some(&bad) = self
            .exit_locations
            .iter()
            .find(|&&l| l < 1 || l > self.split_point)
        {
            return cfg_err(format!("exit at layer {bad} outside edge layers 1..={}", self.split_point));
        }
        if self.thresholds.len() != self.exit_locations.len() {
            return cfg_err(format!(
                "{} thresholds for {} exits",
                self.thresholds.len(),
                self.exit_locations.len()
            ));
        }
        if self.thresholds.iter().any(|t| t.is_nan() || *t < 0.0) {
            return cfg_err("thresholds must be non-negative".into());
        }
        if self.lambdas.len() != self.exit_locations.len() + 1 {
            return cfg_err(format!(
                "{} lambdas for {} exits plus final",
                self.lambdas.len(),
                self.exit_locations.len()
            ));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return cfg_err("lambdas must be non-negative".into());
        }
        let sum: f64 = self.lambdas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return cfg_err(format!("lambdas sum to {sum}, expected 1"));
        }
        Ok(())
    }

    /// Bit-depth of layer `l` (1-based).
    pub fn layer_bits(&self, l: usize) -> u8 {
        if l == 1 || l > self.split_point {
            FULL_PRECISION
        } else {
            self.edge_bits
        }
    }

    /// Residual blocks per stage, extras going to the earliest stages.
    pub fn blocks_per_stage(&self) -> Vec<usize> {
        let blocks = self.n_layers - 1;
        let stages = self.stage_widths.len();
        (0..stages)
            .map(|s| blocks / stages + usize::from(s < blocks % stages))
            .collect()
    }

    /// Output shape `[C, H, W]` of every layer, index 0 being layer 1.
    pub fn layer_shapes(&self) -> Vec<[usize; 3]> {
        let mut shapes = vec![[self.stage_widths[0], self.height, self.width]];
        let (mut h, mut w) = (self.height, self.width);
        for (s, &count) in self.blocks_per_stage().iter().enumerate() {
            for i in 0..count {
                if s > 0 && i == 0 {
                    h = ops::conv_out_dim(h, 3, 2, 1);
                    w = ops::conv_out_dim(w, 3, 2, 1);
                }
                shapes.push([self.stage_widths[s], h, w]);
            }
        }
        shapes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }
}

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
        }
    }

    fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        self.grad.add_assign(g)
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Convolutions and batch norm.
    Backbone,
    Exit(usize),
    Final,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng) as f32).collect()).expect("shape")
}

fn he_conv(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    gaussian(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng)
}

/// Average pool plus fully connected layer.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub weight: Param,
    pub bias: Param,
    cache: Option<(Vec<usize>, Tensor)>,
}

impl Classifier {
    fn new(classes: usize, features: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / features as f64).sqrt();
        Self {
            weight: Param::new(gaussian(&[classes, features], std, rng)),
            bias: Param::new(Tensor::zeros(&[classes])),
            cache: None,
        }
    }

    pub fn forward(&self, act: &Tensor) -> Result<Tensor> {
        let pooled = ops::avgpool_global(act)?;
        ops::fully_connected(&pooled, &self.weight.value, &self.bias.value)
    }

    /// Classify already pooled features `[D]` or `[B, D]`.
    pub fn forward_pooled(&self, pooled: &Tensor) -> Result<Tensor> {
        ops::fully_connected(pooled, &self.weight.value, &self.bias.value)
    }

    fn forward_train(&mut self, act: &Tensor) -> Result<Tensor> {
        let pooled = ops::avgpool_global(act)?;
        let out = ops::fully_connected(&pooled, &self.weight.value, &self.bias.value)?;
        self.cache = Some((act.shape().to_vec(), pooled));
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the gradient of the tapped activation.
    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (shape, pooled) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("classifier backward before forward".into()))?;
        let g = ops::fully_connected_backward(pooled, &self.weight.value, upstream)?;
        self.weight.accumulate(&g.d_weights)?;
        self.bias.accumulate(g.d_bias.as_ref().expect("fc has bias"))?;
        ops::avgpool_global_backward(shape, &g.d_input)
    }

    /// Gradient step restricted to this head's parameters, from pooled features.
    pub fn backward_pooled(&mut self, pooled: &Tensor, upstream: &Tensor) -> Result<()> {
        let g = ops::fully_connected_backward(pooled, &self.weight.value, upstream)?;
        self.weight.accumulate(&g.d_weights)?;
        self.bias.accumulate(g.d_bias.as_ref().expect("fc has bias"))
    }
}

#[derive(Debug, Clone)]
pub struct ExitBranch {
    pub location: usize,
    pub threshold: f64,
    pub head: Classifier,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor,
    bn: BnCache,
    normed: Tensor,
    acts: Tensor,
    conv_w: Tensor,
    alpha: f32,
}

/// Pre-activation residual block: `x + conv(act(bn(x)))`, where `act` is the
/// quantizer for low-precision blocks and ReLU at full precision. The
/// shortcut is the identity or a full-precision strided 1x1 projection.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub bits: u8,
    pub gamma: Param,
    pub beta: Param,
    pub running: RunningStats,
    pub conv: Param,
    pub shortcut: Option<Param>,
    pub stride: usize,
    cache: Option<BlockCache>,
}

impl ResidualBlock {
    fn new(bits: u8, c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv = Param::new(he_conv(c_out, c_in, 3, rng));
        let shortcut = (stride != 1 || c_in != c_out).then(|| Param::new(he_conv(c_out, c_in, 1, rng)));
        Self {
            bits,
            gamma: Param::new(Tensor::full(&[c_in], 1.0)),
            beta: Param::new(Tensor::zeros(&[c_in])),
            running: RunningStats::new(c_in),
            conv,
            shortcut,
            stride,
            cache: None,
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.bits != FULL_PRECISION
    }

    fn quant(&self) -> Option<QuantParams> {
        self.is_quantized()
            .then(|| QuantParams::new(self.bits).expect("validated bits"))
    }

    fn activate(&self, normed: &Tensor) -> Tensor {
        match self.quant() {
            Some(q) => quant::quantize_uniform(normed, &q),
            None => ops::relu(normed),
        }
    }

    fn weights(&self) -> Result<(Tensor, f32)> {
        match self.quant() {
            Some(q) => {
                let qw = quant::quantize_weights(&self.conv.value, &q)?;
                Ok((qw.w_q, qw.alpha))
            }
            None => Ok((self.conv.value.clone(), 1.0)),
        }
    }

    fn shortcut_forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.shortcut {
            Some(p) => ops::conv2d(x, &p.value, self.stride, 0),
            None => Ok(x.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (normed, _) = ops::batchnorm_infer(x, &self.gamma.value, &self.beta.value, &self.running)?;
        let branch = if self.bits == 1 {
            let alpha = quant::weight_scale(&self.conv.value)?;
            quant::xnor_conv2d(&normed, &self.conv.value, self.stride, 1)?.scale(alpha)
        } else {
            let acts = self.activate(&normed);
            let (w, alpha) = self.weights()?;
            let out = ops::conv2d(&acts, &w, self.stride, 1)?;
            if self.is_quantized() {
                out.scale(alpha)
            } else {
                out
            }
        };
        branch.add(&self.shortcut_forward(x)?)
    }

    fn forward_train(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let (normed, bn) = ops::batchnorm_forward(
            x,
            &self.gamma.value,
            &self.beta.value,
            &mut self.running,
            mode,
        )?;
        let acts = self.activate(&normed);
        let (conv_w, alpha) = self.weights()?;
        let mut branch = ops::conv2d(&acts, &conv_w, self.stride, 1)?;
        if self.is_quantized() {
            branch = branch.scale(alpha);
        }
        let out = branch.add(&self.shortcut_forward(x)?)?;
        self.cache = Some(BlockCache {
            input: x.clone(),
            bn,
            normed,
            acts,
            conv_w,
            alpha,
        });
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let c = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("block backward before forward".into()))?;
        // alpha is a per-step constant
        let d_branch = if self.is_quantized() {
            upstream.scale(c.alpha)
        } else {
            upstream.clone()
        };
        let g = ops::conv2d_backward(&c.acts, &c.conv_w, &d_branch, self.stride, 1)?;
        let (d_w, d_normed) = if self.is_quantized() {
            (
                quant::ste_backward(&g.d_weights, &self.conv.value)?,
                quant::ste_backward(&g.d_input, &c.normed)?,
            )
        } else {
            (g.d_weights, ops::relu_backward(&c.normed, &g.d_input)?)
        };
        let (d_bn_in, d_gamma, d_beta) = ops::batchnorm_backward(&c.bn, &self.gamma.value, &d_normed)?;
        let mut d_x = d_bn_in;
        match &mut self.shortcut {
            Some(p) => {
                let sg = ops::conv2d_backward(&c.input, &p.value, upstream, self.stride, 0)?;
                p.accumulate(&sg.d_weights)?;
                d_x.add_assign(&sg.d_input)?;
            }
            None => d_x.add_assign(upstream)?,
        }
        self.conv.accumulate(&d_w)?;
        self.gamma.accumulate(&d_gamma)?;
        self.beta.accumulate(&d_beta)?;
        Ok(d_x)
    }
}

/// Full-precision first convolution.
#[derive(Debug, Clone)]
pub struct Stem {
    pub conv: Param,
    cache: Option<Tensor>,
}

impl Stem {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.conv.value, 1, 1)
    }
}

/// Activation at the split point plus the logits of every early exit.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeOutput {
    pub activation: Tensor,
    pub exit_logits: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct HybridNetwork {
    cfg: HybridNetConfig,
    pub stem: Stem,
    pub blocks: Vec<ResidualBlock>,
    pub exits: Vec<ExitBranch>,
    pub final_head: Classifier,
}

impl HybridNetwork {
    /// Deterministic fan-in-scaled Gaussian initialization. Backbone, final
    /// head and each exit draw from independent streams, so adding or moving
    /// an exit never perturbs the other parameters.
    pub fn build(cfg: HybridNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Stem {
            conv: Param::new(he_conv(cfg.stage_widths[0], cfg.in_channels, 3, &mut rng)),
            cache: None,
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers - 1);
        let mut c_in = cfg.stage_widths[0];
        for (s, &count) in cfg.blocks_per_stage().iter().enumerate() {
            for i in 0..count {
                let layer = blocks.len() + 2;
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let c_out = cfg.stage_widths[s];
                blocks.push(ResidualBlock::new(cfg.layer_bits(layer), c_in, c_out, stride, &mut rng));
                c_in = c_out;
            }
        }
        let shapes = cfg.layer_shapes();
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1a1);
        let final_head = Classifier::new(cfg.num_classes, shapes[cfg.n_layers - 1][0], &mut head_rng);
        let exits = cfg
            .exit_locations
            .iter()
            .zip(&cfg.thresholds)
            .map(|(&loc, &threshold)| {
                let mut r = ChaCha8Rng::seed_from_u64(seed ^ (0xe817_0000 + loc as u64));
                ExitBranch {
                    location: loc,
                    threshold,
                    head: Classifier::new(cfg.num_classes, shapes[loc - 1][0], &mut r),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            stem,
            blocks,
            exits,
            final_head,
        })
    }

    pub fn config(&self) -> &HybridNetConfig {
        &self.cfg
    }

    pub fn num_layers(&self) -> usize {
        self.cfg.n_layers
    }

    pub fn split_point(&self) -> usize {
        self.cfg.split_point
    }

    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    /// Bit-depth actually carried by layer `l`.
    pub fn layer_bits(&self, l: usize) -> u8 {
        if l == 1 {
            FULL_PRECISION
        } else {
            self.blocks[l - 2].bits
        }
    }

    pub fn set_thresholds(&mut self, thresholds: &[f64]) -> Result<()> {
        if thresholds.len() != self.exits.len() {
            return Err(Error::Config(format!(
                "{} thresholds for {} exits",
                thresholds.len(),
                self.exits.len()
            )));
        }
        for (e, &t) in self.exits.iter_mut().zip(thresholds) {
            e.threshold = t;
        }
        self.cfg.thresholds = thresholds.to_vec();
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = self.cfg.input_shape();
        let got = x.shape();
        let sample = match got.len() {
            3 => got,
            4 => &got[1..],
            _ => return Err(Error::dim("rank", format!("input must be [C,H,W] or [B,C,H,W], got {got:?}"))),
        };
        for (axis, (&g, &w)) in ["channels", "height", "width"].iter().zip(sample.iter().zip(&want)) {
            if g != w {
                return Err(Error::dim(*axis, format!("input has {g}, network expects {w}")));
            }
        }
        Ok(())
    }

    /// Eval-mode output of layer `l` given the output of layer `l - 1`
    /// (or the network input when `l == 1`).
    pub fn forward_layer(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        match l {
            1 => {
                self.check_input(x)?;
                self.stem.forward(x)
            }
            l if l >= 2 && l <= self.cfg.n_layers => self.blocks[l - 2].forward(x),
            _ => Err(Error::Index {
                index: l,
                len: self.cfg.n_layers,
            }),
        }
    }

    pub fn exit_logits(&self, k: usize, act: &Tensor) -> Result<Tensor> {
        let e = self.exits.get(k).ok_or(Error::Index {
            index: k,
            len: self.exits.len(),
        })?;
        e.head.forward(act)
    }

    pub fn final_logits(&self, act: &Tensor) -> Result<Tensor> {
        self.final_head.forward(act)
    }

    /// Eval-mode logits of every exit, final exit last.
    pub fn forward_all_exits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let edge = self.forward_edge(x)?;
        let mut out = edge.exit_logits;
        out.push(self.forward_cloud(&edge.activation)?);
        Ok(out)
    }

    /// Layers `1..=M` and the early exits.
    pub fn forward_edge(&self, x: &Tensor) -> Result<EdgeOutput> {
        let mut act = x.clone();
        let mut exit_logits = Vec::with_capacity(self.exits.len());
        for l in 1..=self.cfg.split_point {
            act = self.forward_layer(l, &act)?;
            for e in self.exits.iter().filter(|e| e.location == l) {
                exit_logits.push(e.head.forward(&act)?);
            }
        }
        Ok(EdgeOutput {
            activation: act,
            exit_logits,
        })
    }

    /// Shape `[C, H, W]` the cloud section expects from the edge.
    pub fn split_shape(&self) -> [usize; 3] {
        self.cfg.layer_shapes()[self.cfg.split_point - 1]
    }

    /// Layers `M+1..=N` and the final classifier.
    pub fn forward_cloud(&self, activation: &Tensor) -> Result<Tensor> {
        let want = self.split_shape();
        let got = activation.shape();
        let ok = match got.len() {
            3 => got == want,
            4 => got[1..] == want,
            _ => false,
        };
        if !ok {
            return Err(Error::dim(
                "split activation",
                format!("expected {want:?} (optionally batched), got {got:?}"),
            ));
        }
        let mut act = activation.clone();
        for l in self.cfg.split_point + 1..=self.cfg.n_layers {
            act = self.blocks[l - 2].forward(&act)?;
        }
        self.final_head.forward(&act)
    }

    /// Training forward over a batch `[B, C, H, W]`, caching everything
    /// backward needs. Returns logits `[B, K]` per exit, final last.
    pub fn forward_train(&mut self, x: &Tensor, bn_mode: BnMode) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        if x.rank() != 4 {
            return Err(Error::dim("rank", "training forward expects [B,C,H,W]"));
        }
        let mut act = ops::conv2d(x, &self.stem.conv.value, 1, 1)?;
        self.stem.cache = Some(x.clone());
        let mut logits = Vec::with_capacity(self.exits.len() + 1);
        for l in 1..=self.cfg.n_layers {
            if l >= 2 {
                act = self.blocks[l - 2].forward_train(&act, bn_mode)?;
            }
            for e in self.exits.iter_mut().filter(|e| e.location == l) {
                logits.push(e.head.forward_train(&act)?);
            }
        }
        logits.push(self.final_head.forward_train(&act)?);
        Ok(logits)
    }

    /// Backpropagate per-exit logit gradients (final last; `None` skips an
    /// exit), accumulating into every parameter's `grad`.
    pub fn backward(&mut self, upstream: &[Option<Tensor>]) -> Result<()> {
        if upstream.len() != self.exits.len() + 1 {
            return Err(Error::dim(
                "exits",
                format!("{} upstream gradients for {} exits", upstream.len(), self.exits.len() + 1),
            ));
        }
        let stem_in = self
            .stem
            .cache
            .clone()
            .ok_or_else(|| Error::State("backward before forward".into()))?;
        let n = self.cfg.n_layers;
        let mut grad: Option<Tensor> = match &upstream[self.exits.len()] {
            Some(g) => Some(self.final_head.backward(g)?),
            None => None,
        };
        for l in (1..=n).rev() {
            for (k, e) in self.exits.iter_mut().enumerate() {
                if e.location != l {
                    continue;
                }
                if let Some(g) = &upstream[k] {
                    let tap = e.head.backward(g)?;
                    match &mut grad {
                        Some(acc) => acc.add_assign(&tap)?,
                        None => grad = Some(tap),
                    }
                }
            }
            let Some(g) = grad.take() else { continue };
            if l >= 2 {
                grad = Some(self.blocks[l - 2].backward(&g)?);
            } else {
                let sg = ops::conv2d_backward(&stem_in, &self.stem.conv.value, &g, 1, 1)?;
                self.stem.conv.accumulate(&sg.d_weights)?;
            }
        }
        Ok(())
    }

    /// Visit every trainable parameter with a stable name and its group.
    pub fn visit_params(&mut self, mut f: impl FnMut(&str, ParamGroup, &mut Param)) {
        f("stem.conv.weight", ParamGroup::Backbone, &mut self.stem.conv);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.bn.gamma"), ParamGroup::Backbone, &mut b.gamma);
            f(&format!("block{i}.bn.beta"), ParamGroup::Backbone, &mut b.beta);
            f(&format!("block{i}.conv.weight"), ParamGroup::Backbone, &mut b.conv);
            if let Some(p) = &mut b.shortcut {
                f(&format!("block{i}.shortcut.weight"), ParamGroup::Backbone, p);
            }
        }
        for (k, e) in self.exits.iter_mut().enumerate() {
            f(&format!("exit{k}.fc.weight"), ParamGroup::Exit(k), &mut e.head.weight);
            f(&format!("exit{k}.fc.bias"), ParamGroup::Exit(k), &mut e.head.bias);
        }
        f("final.fc.weight", ParamGroup::Final, &mut self.final_head.weight);
        f("final.fc.bias", ParamGroup::Final, &mut self.final_head.bias);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(|_, _, p| p.grad.fill(0.0));
    }

    /// Every stored tensor (parameters and batch-norm statistics) by name,
    /// in a fixed order.
    pub fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("stem.conv.weight".into(), &self.stem.conv.value)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.bn.gamma"), &b.gamma.value));
            out.push((format!("block{i}.bn.beta"), &b.beta.value));
            out.push((format!("block{i}.bn.running_mean"), &b.running.mean));
            out.push((format!("block{i}.bn.running_var"), &b.running.var));
            out.push((format!("block{i}.conv.weight"), &b.conv.value));
            if let Some(p) = &b.shortcut {
                out.push((format!("block{i}.shortcut.weight"), &p.value));
            }
        }
        for (k, e) in self.exits.iter().enumerate() {
            out.push((format!("exit{k}.fc.weight"), &e.head.weight.value));
            out.push((format!("exit{k}.fc.bias"), &e.head.bias.value));
        }
        out.push(("final.fc.weight".into(), &self.final_head.weight.value));
        out.push(("final.fc.bias".into(), &self.final_head.bias.value));
        out
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("stem.conv.weight".into(), &mut self.stem.conv.value)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.bn.gamma"), &mut b.gamma.value));
            out.push((format!("block{i}.bn.beta"), &mut b.beta.value));
            out.push((format!("block{i}.bn.running_mean"), &mut b.running.mean));
            out.push((format!("block{i}.bn.running_var"), &mut b.running.var));
            out.push((format!("block{i}.conv.weight"), &mut b.conv.value));
            if let Some(p) = &mut b.shortcut {
                out.push((format!("block{i}.shortcut.weight"), &mut p.value));
            }
        }
        for (k, e) in self.exits.iter_mut().enumerate() {
            out.push((format!("exit{k}.fc.weight"), &mut e.head.weight.value));
            out.push((format!("exit{k}.fc.bias"), &mut e.head.bias.value));
        }
        out.push(("final.fc.weight".into(), &mut self.final_head.weight.value));
        out.push(("final.fc.bias".into(), &mut self.final_head.bias.value));
        out
    }

    /// Overwrite stored tensors; names and shapes must match [`Self::state`] exactly.
    pub fn load_state(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let slots = self.state_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, network needs {}",
                tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), (got_name, t)) in slots.into_iter().zip(tensors) {
            if name != got_name {
                return Err(Error::Format(format!("expected tensor {name}, found {got_name}")));
            }
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?} vs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Detach cached activations; keeps parameters and statistics.
    pub fn clear_caches(&mut self) {
        self.stem.cache = None;
        for b in &mut self.blocks {
            b.cache = None;
        }
        for e in &mut self.exits {
            e.head.cache = None;
        }
        self.final_head.cache = None;
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        let mut me = self.clone();
        me.visit_params(|_, _, p| n += p.value.numel());
        n
    }
}
