//! Network graph, forward evaluation and structural transforms.

mod bn;
mod builders;
mod transform;

pub use bn::{
    absorb_bn_scale, bn_fold, bn_fold_affine, bn_forward_train, bn_infer, BatchNormParams, DoubleF64, FoldedAffine, BN_EPS,
    BN_MOMENTUM,
};
pub use builders::{build_kws_net, build_resblock_net, KwsConfig, ResNetConfig};
pub use transform::{attach_quantizers, input_quantizers, replace_bn_relu, set_bitwidths, set_input_bits};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseInjector;
use crate::quant::{self, levels_for_bits, LowerBound, QuantConfig};
use crate::tensor::{NodeId, Tape, Tensor};

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Subject to weight decay (conv/dense weights only).
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
            trainable,
            decay,
        });
        self.params.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn scalar(&self, id: ParamId) -> f32 {
        self.params[id].tensor.data()[0]
    }

    pub fn set_scalar(&mut self, id: ParamId, v: f32) {
        self.params[id].tensor.data_mut()[0] = v;
    }
}

/// Quantizer attached to a convolution's weights (always `b = -1`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightQuant {
    pub bits: u32,
    pub log_scale: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Input {
        shape: Vec<usize>,
    },
    /// Full-precision dense layer; frame-wise when the input has a trailing
    /// time axis.
    Dense {
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Conv1d {
        weight: ParamId,
        dilation: usize,
        padding: usize,
        weight_quant: Option<WeightQuant>,
    },
    Conv2d {
        weight: ParamId,
        stride: usize,
        padding: usize,
        weight_quant: Option<WeightQuant>,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f32,
        momentum: f32,
    },
    Relu,
    /// Learned activation quantizer.
    Quant {
        bits: u32,
        lower: LowerBound,
        log_scale: ParamId,
    },
    Add,
    GlobalAvgPool,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Dense { .. } => "dense",
            Layer::Conv1d { .. } => "conv1d",
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm { .. } => "batch_norm",
            Layer::Relu => "relu",
            Layer::Quant { .. } => "quant",
            Layer::Add => "add",
            Layer::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub fn weight_quant(&self) -> Option<WeightQuant> {
        match self {
            Layer::Conv1d { weight_quant, .. } | Layer::Conv2d { weight_quant, .. } => *weight_quant,
            _ => None,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv1d { .. } | Layer::Conv2d { .. })
    }

    pub fn param_ids_mut(&mut self) -> Vec<&mut ParamId> {
        match self {
            Layer::Dense { weight, bias } => {
                let mut v = vec![weight];
                v.extend(bias.as_mut());
                v
            }
            Layer::Conv1d { weight, weight_quant, .. } | Layer::Conv2d { weight, weight_quant, .. } => {
                let mut v = vec![weight];
                v.extend(weight_quant.as_mut().map(|wq| &mut wq.log_scale));
                v
            }
            Layer::BatchNorm { gamma, beta, running_mean, running_var, .. } => vec![gamma, beta, running_mean, running_var],
            Layer::Quant { log_scale, .. } => vec![log_scale],
            Layer::Input { .. } | Layer::Relu | Layer::Add | Layer::GlobalAvgPool => vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Quantizers are pass-through.
    Fp,
    /// Quantizers active, BN and ReLU still present.
    FakeQuant,
    /// BN-free: quantizers double as the nonlinearity.
    Fq,
}

/// Ordered node list plus parameters. Node 0 is the input; the last node
/// produces the class logits (softmax lives in the loss head).
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub nodes: Vec<Node>,
    pub params: ParamStore,
    pub mode: Mode,
}

/// Everything a forward pass recorded.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: NodeId,
    /// Output node of each network node.
    pub outputs: Vec<NodeId>,
    /// Tape leaf of each parameter that was used.
    pub param_nodes: Vec<Option<NodeId>>,
    /// Minibatch statistics per BN node: (node, mean, unbiased var).
    pub bn_stats: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

impl ForwardPass {
    pub fn logits_tensor(&self) -> Tensor {
        self.tape.to_tensor(self.logits)
    }
}

impl Network {
    pub fn new(nodes: Vec<Node>, params: ParamStore, mode: Mode) -> Result<Self> {
        let net = Network { nodes, params, mode };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Structure(m));
        match self.nodes.first() {
            Some(Node {
                layer: Layer::Input { shape },
                inputs,
                ..
            }) if inputs.is_empty() && !shape.is_empty() && shape.iter().all(|&d| d > 0) => {}
            _ => return bad("node 0 must be an input node with a non-empty shape".into()),
        }
        let np = self.params.len();
        let check_param = |id: ParamId, node: &str| -> Result<()> {
            if id >= np {
                return Err(Error::Structure(format!("node '{node}' references missing parameter {id}")));
            }
            Ok(())
        };
        let check_rank = |id: ParamId, rank: usize, node: &str| -> Result<()> {
            check_param(id, node)?;
            let s = self.params.get(id).tensor.shape();
            if s.len() != rank || s.contains(&0) {
                return Err(Error::Structure(format!("node '{node}': parameter {id} must have rank {rank}, got {s:?}")));
            }
            Ok(())
        };
        let check_scalar = |id: ParamId, node: &str| -> Result<()> {
            check_param(id, node)?;
            if self.params.get(id).tensor.numel() != 1 {
                return Err(Error::Structure(format!("node '{node}': log-scale parameter {id} must be a scalar")));
            }
            Ok(())
        };
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            let arity = match n.layer {
                Layer::Input { .. } => return bad(format!("node '{}' : only node 0 may be an input", n.name)),
                Layer::Add => 2,
                _ => 1,
            };
            if n.inputs.len() != arity || n.inputs.iter().any(|&j| j >= i) {
                return bad(format!("node '{}' has invalid inputs {:?}", n.name, n.inputs));
            }
            match &n.layer {
                Layer::Dense { weight, bias } => {
                    check_rank(*weight, 2, &n.name)?;
                    if let Some(b) = bias {
                        check_rank(*b, 1, &n.name)?;
                    }
                }
                Layer::Conv1d { weight, weight_quant, dilation, .. } => {
                    check_rank(*weight, 3, &n.name)?;
                    if *dilation == 0 {
                        return bad(format!("node '{}': dilation must be positive", n.name));
                    }
                    if let Some(wq) = weight_quant {
                        check_scalar(wq.log_scale, &n.name)?;
                        levels_for_bits(wq.bits)?;
                    }
                }
                Layer::Conv2d { weight, weight_quant, stride, .. } => {
                    check_rank(*weight, 4, &n.name)?;
                    if *stride == 0 {
                        return bad(format!("node '{}': stride must be positive", n.name));
                    }
                    if let Some(wq) = weight_quant {
                        check_scalar(wq.log_scale, &n.name)?;
                        levels_for_bits(wq.bits)?;
                    }
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var, .. } => {
                    for p in [gamma, beta, running_mean, running_var] {
                        check_rank(*p, 1, &n.name)?;
                    }
                    let c = self.params.get(*gamma).tensor.numel();
                    if [beta, running_mean, running_var].iter().any(|p| self.params.get(**p).tensor.numel() != c) {
                        return bad(format!("node '{}': BN parameters differ in length", n.name));
                    }
                    if self.mode == Mode::Fq {
                        return bad(format!("BN node '{}' present in fq mode", n.name));
                    }
                }
                Layer::Quant { bits, log_scale, .. } => {
                    check_scalar(*log_scale, &n.name)?;
                    levels_for_bits(*bits)?;
                }
                Layer::Relu | Layer::Add | Layer::GlobalAvgPool | Layer::Input { .. } => {}
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        match &self.nodes[0].layer {
            Layer::Input { shape } => shape,
            _ => unreachable!("validated"),
        }
    }

    pub fn output_node(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Indices of nodes that consume node `i`.
    pub fn consumers(&self, i: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&i))
            .map(|(j, _)| j)
            .collect()
    }

    pub fn count_layers(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.layer.kind() == kind).count()
    }

    /// Number of trainable scalars (weights, biases, BN affine, log-scales).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    pub fn quant_config(&self, node: usize) -> Option<QuantConfig> {
        match &self.nodes[node].layer {
            Layer::Quant { bits, lower, log_scale } => Some(QuantConfig {
                bits: *bits,
                lower: *lower,
                log_scale: self.params.scalar(*log_scale),
            }),
            _ => None,
        }
    }

    pub fn weight_quant_config(&self, node: usize) -> Option<QuantConfig> {
        self.nodes[node].layer.weight_quant().map(|wq| QuantConfig {
            bits: wq.bits,
            lower: LowerBound::Signed,
            log_scale: self.params.scalar(wq.log_scale),
        })
    }

    pub fn bn_params(&self, node: usize) -> Option<BatchNormParams> {
        match &self.nodes[node].layer {
            Layer::BatchNorm { gamma, beta, running_mean, running_var, eps, .. } => {
                let v = |id: &ParamId| self.params.get(*id).tensor.data().iter().map(|&x| x as f64).collect();
                Some(BatchNormParams {
                    gamma: v(gamma),
                    beta: v(beta),
                    running_mean: v(running_mean),
                    running_var: v(running_var),
                    eps: *eps as f64,
                    populated: true,
                })
            }
            _ => None,
        }
    }

    /// Conv node feeding directly into an activation quantizer: the MAC
    /// result's LSB is that quantizer's interval.
    fn mac_lsb(&self, conv: usize) -> Option<f32> {
        let cons = self.consumers(conv);
        match cons.as_slice() {
            [q] => self.quant_config(*q).map(|c| c.lsb()),
            _ => None,
        }
    }

    pub fn forward(&self, input: &Tensor, train: bool, noise: Option<&mut NoiseInjector>) -> Result<ForwardPass> {
        let tape = if train { Tape::new() } else { Tape::no_grad() };
        self.forward_on(tape, input, train, noise)
    }

    pub fn forward_on(&self, mut tape: Tape, input: &Tensor, train: bool, mut noise: Option<&mut NoiseInjector>) -> Result<ForwardPass> {
        let xs = input.shape();
        if xs.len() != self.input_shape().len() + 1 || &xs[1..] != self.input_shape() {
            return Err(Error::shape(
                "forward",
                "input",
                format!("expected [B, {:?}], got {:?}", self.input_shape(), xs),
            ));
        }
        let quantize = self.mode != Mode::Fp;
        let mut param_nodes: Vec<Option<NodeId>> = vec![None; self.params.len()];
        let mut outputs: Vec<NodeId> = Vec::with_capacity(self.nodes.len());
        let mut bn_stats = Vec::new();

        let mut pnode = |tape: &mut Tape, id: ParamId| -> NodeId {
            *param_nodes[id].get_or_insert_with(|| {
                let p = &self.params.get(id);
                let mut t = p.tensor.clone();
                t.set_requires_grad(train && p.trainable);
                tape.leaf(&t)
            })
        };

        for (i, node) in self.nodes.iter().enumerate() {
            let inp = |k: usize| outputs[node.inputs[k]];
            let out = match &node.layer {
                Layer::Input { .. } => tape.leaf(input),
                Layer::Dense { weight, bias } => {
                    let w = pnode(&mut tape, *weight);
                    let b = bias.map(|b| pnode(&mut tape, b));
                    tape.dense(inp(0), w, b)?
                }
                Layer::Conv1d { weight, dilation, padding, weight_quant } => {
                    let (x, w) = self.conv_operands(&mut tape, &mut pnode, inp(0), *weight, *weight_quant, quantize, noise.as_deref_mut())?;
                    let y = tape.conv1d(x, w, *dilation, *padding)?;
                    self.mac_noise(&mut tape, i, y, noise.as_deref_mut())?
                }
                Layer::Conv2d { weight, stride, padding, weight_quant } => {
                    let (x, w) = self.conv_operands(&mut tape, &mut pnode, inp(0), *weight, *weight_quant, quantize, noise.as_deref_mut())?;
                    let y = tape.conv2d(x, w, *stride, *padding)?;
                    self.mac_noise(&mut tape, i, y, noise.as_deref_mut())?
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var, eps, .. } => {
                    if train {
                        let g = pnode(&mut tape, *gamma);
                        let b = pnode(&mut tape, *beta);
                        let (y, m, v) = tape.batch_norm(inp(0), g, b, *eps)?;
                        bn_stats.push((i, m, v));
                        y
                    } else {
                        let p = |id: &ParamId| self.params.get(*id).tensor.data();
                        let (g, b, m, v) = (p(gamma), p(beta), p(running_mean), p(running_var));
                        let mut scale = vec![0.0f32; g.len()];
                        let mut shift = vec![0.0f32; g.len()];
                        for c in 0..g.len() {
                            let sigma = ((v[c].max(0.0) + eps) as f64).sqrt();
                            scale[c] = (g[c] as f64 / sigma) as f32;
                            shift[c] = (b[c] as f64 - g[c] as f64 * m[c] as f64 / sigma) as f32;
                        }
                        tape.channel_affine(inp(0), &scale, &shift)?
                    }
                }
                Layer::Relu => tape.relu(inp(0)),
                Layer::Quant { bits, lower, log_scale } => {
                    if quantize {
                        let s = pnode(&mut tape, *log_scale);
                        tape.quantize(inp(0), s, lower.value(), levels_for_bits(*bits)?)?
                    } else {
                        inp(0)
                    }
                }
                Layer::Add => tape.add(inp(0), inp(1))?,
                Layer::GlobalAvgPool => tape.global_avg_pool(inp(0))?,
            };
            outputs.push(out);
        }
        let logits = *outputs.last().unwrap();
        if tape.shape(logits).len() != 2 {
            return Err(Error::Structure(format!(
                "network output must be [B, classes], got {:?}",
                tape.shape(logits)
            )));
        }
        Ok(ForwardPass {
            tape,
            logits,
            outputs,
            param_nodes,
            bn_stats,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_operands(
        &self,
        tape: &mut Tape,
        pnode: &mut impl FnMut(&mut Tape, ParamId) -> NodeId,
        x: NodeId,
        weight: ParamId,
        wq: Option<WeightQuant>,
        quantize: bool,
        mut noise: Option<&mut NoiseInjector>,
    ) -> Result<(NodeId, NodeId)> {
        let mut w = pnode(tape, weight);
        if let (true, Some(wq)) = (quantize, wq) {
            let s = pnode(tape, wq.log_scale);
            let n = levels_for_bits(wq.bits)?;
            w = tape.quantize(w, s, -1.0, n)?;
            if let Some(inj) = noise.as_deref_mut() {
                let lsb = self.params.scalar(wq.log_scale).exp() / n as f32;
                if let Some(d) = inj.weight_noise(weight, tape.value(w).len(), lsb) {
                    w = tape.add_const(w, &d)?;
                }
            }
        }
        let mut x = x;
        if let (Some(inj), Some(g)) = (noise, tape.grid(x)) {
            let lsb = g.scale / g.levels as f32;
            if let Some(d) = inj.activation_noise(tape.value(x).len(), lsb) {
                x = tape.add_const(x, &d)?;
            }
        }
        Ok((x, w))
    }

    fn mac_noise(&self, tape: &mut Tape, node: usize, y: NodeId, noise: Option<&mut NoiseInjector>) -> Result<NodeId> {
        let Some(inj) = noise else { return Ok(y) };
        if self.mode == Mode::Fp {
            return Ok(y);
        }
        match self.mac_lsb(node) {
            Some(lsb) => match inj.mac_noise(tape.value(y).len(), lsb) {
                Some(d) => tape.add_const(y, &d),
                None => Ok(y),
            },
            None => Ok(y),
        }
    }

    /// EMA update of running statistics from a training forward pass.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, Vec<f32>, Vec<f32>)]) {
        for (node, mean, var) in stats {
            if let Layer::BatchNorm { running_mean, running_var, momentum, .. } = self.nodes[*node].layer {
                let m = momentum;
                for (r, b) in self.params.get_mut(running_mean).tensor.data_mut().iter_mut().zip(mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in self.params.get_mut(running_var).tensor.data_mut().iter_mut().zip(var) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
    }

    /// Codes of every activation quantizer's output, keyed by node index.
    pub fn activation_codes(&self, pass: &ForwardPass) -> Vec<(usize, Vec<i32>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.layer {
                Layer::Quant { .. } => pass.tape.grid(pass.outputs[i]).map(|g| (i, g.codes.clone())),
                _ => None,
            })
            .collect()
    }

    /// Largest distance from any active quantizer output to its grid.
    pub fn max_grid_distance(&self, pass: &ForwardPass) -> f32 {
        let mut worst = 0.0f32;
        for (i, n) in self.nodes.iter().enumerate() {
            if let Layer::Quant { .. } = n.layer {
                if let Some(g) = pass.tape.grid(pass.outputs[i]) {
                    for (&v, &c) in pass.tape.value(pass.outputs[i]).iter().zip(&g.codes) {
                        worst = worst.max((v - quant::dequantize(c, g.scale, g.levels)).abs());
                    }
                }
            }
        }
        worst
    }
}
