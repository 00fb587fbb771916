use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Layer, Mode, Network, Node, ParamId, ParamStore, WeightQuant, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::quant::{levels_for_bits, LowerBound};
use crate::tensor::Tensor;

/// Dilated 1-D keyword-spotting topology. Defaults give the full-size
/// network; tests shrink every dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KwsConfig {
    pub in_features: usize,
    pub embed: usize,
    pub channels: usize,
    pub classes: usize,
    pub taps: usize,
    pub dilations: Vec<usize>,
    pub frames: usize,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub input_bits: u32,
}

impl Default for KwsConfig {
    fn default() -> Self {
        KwsConfig {
            in_features: 39,
            embed: 100,
            channels: 45,
            classes: 12,
            taps: 3,
            dilations: vec![1, 2, 4, 8, 16, 32, 64],
            frames: 256,
            weight_bits: 2,
            act_bits: 4,
            input_bits: 4,
        }
    }
}

impl KwsConfig {
    /// Input frames seen by one output frame of the last conv.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().map(|d| (self.taps - 1) * d).sum::<usize>()
    }

    /// Output length of each conv layer for `frames` input frames.
    pub fn conv_lengths(&self, frames: usize) -> Option<Vec<usize>> {
        let mut len = frames;
        let mut out = Vec::with_capacity(self.dilations.len());
        for &d in &self.dilations {
            len = len.checked_sub((self.taps - 1) * d).filter(|&l| l > 0)?;
            out.push(len);
        }
        Some(out)
    }

    /// Multiply-accumulates per sample (dense embedding plus convs).
    pub fn mac_count(&self, frames: usize) -> Option<usize> {
        let lens = self.conv_lengths(frames)?;
        let mut total = self.in_features * self.embed * frames;
        let mut c_in = self.embed;
        for (i, l) in lens.iter().enumerate() {
            let c_out = self.conv_out(i);
            total += c_in * c_out * self.taps * l;
            c_in = c_out;
        }
        Some(total)
    }

    fn conv_out(&self, i: usize) -> usize {
        if i + 1 == self.dilations.len() {
            self.classes
        } else {
            self.channels
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResNetConfig {
    pub in_channels: usize,
    pub hw: usize,
    pub classes: usize,
    /// Filters per stage; each stage after the first halves the resolution.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub weight_bits: u32,
    pub act_bits: u32,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            in_channels: 3,
            hw: 32,
            classes: 10,
            widths: vec![16, 32, 64],
            blocks_per_stage: 3,
            weight_bits: 2,
            act_bits: 4,
        }
    }
}

struct Builder {
    nodes: Vec<Node>,
    params: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(input: Vec<usize>, seed: u64) -> Self {
        Builder {
            nodes: vec![Node {
                name: "input".into(),
                layer: Layer::Input { shape: input },
                inputs: vec![],
            }],
            params: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn node(&mut self, name: String, layer: Layer, inputs: Vec<usize>) -> usize {
        self.nodes.push(Node { name, layer, inputs });
        self.nodes.len() - 1
    }

    fn normal(&mut self, shape: Vec<usize>, std: f32) -> Tensor {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }

    fn scale_param(&mut self, name: String) -> ParamId {
        self.params.push(name, Tensor::new(vec![1], vec![0.0]).unwrap(), true, false)
    }

    fn quant(&mut self, name: &str, bits: u32, lower: LowerBound, x: usize) -> usize {
        let log_scale = self.scale_param(format!("{name}.s"));
        self.node(name.into(), Layer::Quant { bits, lower, log_scale }, vec![x])
    }

    fn batch_norm(&mut self, name: &str, c: usize, x: usize) -> usize {
        let p = &mut self.params;
        let gamma = p.push(format!("{name}.gamma"), Tensor::new(vec![c], vec![1.0; c]).unwrap(), true, false);
        let beta = p.push(format!("{name}.beta"), Tensor::zeros(vec![c]), true, false);
        let running_mean = p.push(format!("{name}.running_mean"), Tensor::zeros(vec![c]), false, false);
        let running_var = p.push(format!("{name}.running_var"), Tensor::new(vec![c], vec![1.0; c]).unwrap(), false, false);
        let layer = Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        };
        self.node(name.into(), layer, vec![x])
    }

    /// He-initialized quantized convolution weight.
    fn conv_weight(&mut self, name: &str, shape: Vec<usize>, bits: u32) -> (ParamId, WeightQuant) {
        let fan_in: usize = shape[1..].iter().product();
        let w = self.normal(shape, (2.0 / fan_in as f32).sqrt());
        let weight = self.params.push(format!("{name}.weight"), w, true, true);
        let log_scale = self.scale_param(format!("{name}.weight.s"));
        (weight, WeightQuant { bits, log_scale })
    }

    fn conv1d(&mut self, name: &str, c_in: usize, c_out: usize, taps: usize, dilation: usize, bits: u32, x: usize) -> usize {
        let (weight, wq) = self.conv_weight(name, vec![c_out, c_in, taps], bits);
        let layer = Layer::Conv1d {
            weight,
            dilation,
            padding: 0,
            weight_quant: Some(wq),
        };
        self.node(name.into(), layer, vec![x])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, bits: u32, x: usize) -> usize {
        let (weight, wq) = self.conv_weight(name, vec![c_out, c_in, k, k], bits);
        let layer = Layer::Conv2d {
            weight,
            stride,
            padding: k / 2,
            weight_quant: Some(wq),
        };
        self.node(name.into(), layer, vec![x])
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize, gain: f32, x: usize) -> usize {
        let w = self.normal(vec![n_out, n_in], (gain / n_in as f32).sqrt());
        let weight = self.params.push(format!("{name}.weight"), w, true, true);
        let bias = self.params.push(format!("{name}.bias"), Tensor::zeros(vec![n_out]), true, false);
        self.node(name.into(), Layer::Dense { weight, bias: Some(bias) }, vec![x])
    }

    fn finish(self) -> Result<Network> {
        Network::new(self.nodes, self.params, Mode::Fp)
    }
}

/// Frame-wise dense embedding → BN → input quantizer → dilated conv stack
/// (conv → BN → ReLU → quantized ReLU) → global average pool. The last conv
/// has one filter per class, so the pooled output is the logit vector.
pub fn build_kws_net(cfg: &KwsConfig, seed: u64) -> Result<Network> {
    if cfg.dilations.is_empty() || cfg.taps == 0 || cfg.embed == 0 || cfg.channels == 0 || cfg.classes < 2 {
        return Err(Error::Config(format!("invalid keyword-spotting config {cfg:?}")));
    }
    levels_for_bits(cfg.weight_bits)?;
    levels_for_bits(cfg.act_bits)?;
    levels_for_bits(cfg.input_bits)?;
    if cfg.conv_lengths(cfg.frames).is_none() {
        return Err(Error::Config(format!(
            "{} frames is shorter than the receptive field {}",
            cfg.frames,
            cfg.receptive_field()
        )));
    }
    let mut b = Builder::new(vec![cfg.in_features, cfg.frames], seed);
    let mut x = b.dense("embed", cfg.in_features, cfg.embed, 1.0, 0);
    x = b.batch_norm("embed.bn", cfg.embed, x);
    x = b.quant("embed.q", cfg.input_bits, LowerBound::Signed, x);
    let mut c_in = cfg.embed;
    for (i, &d) in cfg.dilations.iter().enumerate() {
        let c_out = cfg.conv_out(i);
        let name = format!("conv{}", i + 1);
        x = b.conv1d(&name, c_in, c_out, cfg.taps, d, cfg.weight_bits, x);
        x = b.batch_norm(&format!("{name}.bn"), c_out, x);
        x = b.node(format!("{name}.relu"), Layer::Relu, vec![x]);
        x = b.quant(&format!("{name}.q"), cfg.act_bits, LowerBound::Unsigned, x);
        c_in = c_out;
    }
    b.node("pool".into(), Layer::GlobalAvgPool, vec![x]);
    b.finish()
}

/// Residual network: quantized input → conv stem → stages of residual
/// subblocks (1x1 conv + BN shortcut on shape change) → pool → dense.
pub fn build_resblock_net(cfg: &ResNetConfig, seed: u64) -> Result<Network> {
    if cfg.widths.is_empty() || cfg.widths.contains(&0) || cfg.blocks_per_stage == 0 || cfg.hw == 0 || cfg.classes < 2 {
        return Err(Error::Config(format!("invalid residual network config {cfg:?}")));
    }
    levels_for_bits(cfg.weight_bits)?;
    levels_for_bits(cfg.act_bits)?;
    let (wb, ab) = (cfg.weight_bits, cfg.act_bits);
    let mut b = Builder::new(vec![cfg.in_channels, cfg.hw, cfg.hw], seed);
    let mut x = b.quant("input.q", ab, LowerBound::Signed, 0);
    let w0 = cfg.widths[0];
    x = b.conv2d("stem", cfg.in_channels, w0, 3, 1, wb, x);
    x = b.batch_norm("stem.bn", w0, x);
    x = b.node("stem.relu".into(), Layer::Relu, vec![x]);
    x = b.quant("stem.q", ab, LowerBound::Unsigned, x);
    let mut c_in = w0;
    for (si, &w) in cfg.widths.iter().enumerate() {
        for bi in 0..cfg.blocks_per_stage {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let p = format!("s{}b{}", si + 1, bi + 1);
            let mut y = b.conv2d(&format!("{p}.conv1"), c_in, w, 3, stride, wb, x);
            y = b.batch_norm(&format!("{p}.bn1"), w, y);
            y = b.node(format!("{p}.relu1"), Layer::Relu, vec![y]);
            y = b.quant(&format!("{p}.q1"), ab, LowerBound::Unsigned, y);
            y = b.conv2d(&format!("{p}.conv2"), w, w, 3, 1, wb, y);
            y = b.batch_norm(&format!("{p}.bn2"), w, y);
            let short = if stride != 1 || c_in != w {
                let s = b.conv2d(&format!("{p}.down"), c_in, w, 1, stride, wb, x);
                b.batch_norm(&format!("{p}.down.bn"), w, s)
            } else {
                x
            };
            let j = b.node(format!("{p}.add"), Layer::Add, vec![y, short]);
            let j = b.node(format!("{p}.relu"), Layer::Relu, vec![j]);
            x = b.quant(&format!("{p}.q"), ab, LowerBound::Unsigned, j);
            c_in = w;
        }
    }
    x = b.node("pool".into(), Layer::GlobalAvgPool, vec![x]);
    b.dense("fc", c_in, cfg.classes, 1.0, x);
    b.finish()
}
