//! Integer execution of BN-free networks.
//!
//! A convolution whose inputs and weights sit on quantizer grids computes
//! `y = k·S` with `S = Σ w_int·a_int` and `k = (e^{s_w}/n_w)(e^{s_a}/n_a)`.
//! The following quantizer maps `y` to a code; because that map is monotone
//! in `S`, it is a staircase over the integers and can be stored as sorted
//! thresholds on `S`. Thresholds are found by searching the exact float rule
//! the fake-quant path uses, so both paths agree on every reachable `S`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, Mode, Network, Node, ParamStore};
use crate::quant::{self, LowerBound, QuantConfig};
use crate::tensor::{NodeId, Tape, Tensor};

/// Sorted cut points: `bin(S) = lo_code + #{t : t <= S}`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdPlan {
    pub lo_code: i32,
    pub thresholds: Vec<i64>,
}

impl ThresholdPlan {
    pub fn hi_code(&self) -> i32 {
        self.lo_code + self.thresholds.len() as i32
    }

    #[inline]
    pub fn bin(&self, s: i64) -> i32 {
        self.lo_code + self.thresholds.partition_point(|&t| t <= s) as i32
    }
}

/// Builds the staircase of a monotone non-decreasing `rule` on
/// `[lo_s, hi_s]` with codes in `[lo_code, hi_code]`. A code never reached
/// inside the range gets threshold `hi_s + 1`; one already reached at `lo_s`
/// gets `lo_s`.
pub fn compile_thresholds(rule: impl Fn(i64) -> i32, lo_s: i64, hi_s: i64, lo_code: i32, hi_code: i32) -> ThresholdPlan {
    let thresholds = (lo_code + 1..=hi_code)
        .map(|m| {
            let (mut lo, mut hi) = (lo_s, hi_s + 1);
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                if rule(mid) >= m {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            lo
        })
        .collect();
    ThresholdPlan { lo_code, thresholds }
}

/// Output code of an accumulator value under the fake-quant float rule.
#[inline]
pub fn float_rule(k: f64, out: &QuantConfig, s: i64) -> i32 {
    quant::code_of(quant::mac_to_real(k, s), out.scale(), out.lower.value(), out.levels())
}

/// Smallest signed width that holds every `|S| <= n_w·n_a·fan_in`.
pub fn accumulator_bits(w_levels: u32, a_levels: u32, fan_in: usize) -> u32 {
    let values = 2 * w_levels as u128 * a_levels as u128 * fan_in as u128 + 1;
    let mut bits = 0;
    while (1u128 << bits) < values {
        bits += 1;
    }
    bits
}

/// Counts of primitive accumulator operations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpCount {
    pub adds: u64,
    pub subs: u64,
    pub muls: u64,
}

impl std::ops::AddAssign for OpCount {
    fn add_assign(&mut self, o: OpCount) {
        self.adds += o.adds;
        self.subs += o.subs;
        self.muls += o.muls;
    }
}

trait Mac {
    fn mac(acc: &mut i64, w: i8, a: i32, ops: &mut OpCount);
}

/// Weights in {−1, 0, 1}: add, subtract or skip.
struct AddSub;
impl Mac for AddSub {
    #[inline]
    fn mac(acc: &mut i64, w: i8, a: i32, ops: &mut OpCount) {
        match w {
            1 => {
                *acc += a as i64;
                ops.adds += 1;
            }
            -1 => {
                *acc -= a as i64;
                ops.subs += 1;
            }
            _ => {}
        }
    }
}

struct Multiply;
impl Mac for Multiply {
    #[inline]
    fn mac(acc: &mut i64, w: i8, a: i32, ops: &mut OpCount) {
        if w != 0 {
            *acc += w as i64 * a as i64;
            ops.muls += 1;
            ops.adds += 1;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConvGeometry {
    Conv1d { dilation: usize, padding: usize },
    Conv2d { stride: usize, padding: usize },
}

/// One compiled convolution plus the quantizer that consumes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegerLayerPlan {
    pub name: String,
    pub geometry: ConvGeometry,
    /// `[C_out, C_in, K]` or `[C_out, C_in, Kh, Kw]`.
    pub weight_shape: Vec<usize>,
    #[serde(skip)]
    pub weights: Vec<i8>,
    pub weight_quant: QuantConfig,
    pub input_quant: QuantConfig,
    pub output_quant: QuantConfig,
    /// Real value of one accumulator unit.
    pub k: f64,
    #[serde(skip)]
    pub thresholds: ThresholdPlan,
    pub acc_bits: u32,
}

impl IntegerLayerPlan {
    pub fn fan_in(&self) -> usize {
        self.weight_shape[1..].iter().product()
    }

    /// Largest `|S|` any input can produce.
    pub fn s_bound(&self) -> i64 {
        let (lo, hi) = self.input_quant.code_bounds();
        let a = lo.unsigned_abs().max(hi.unsigned_abs()) as i64;
        self.weight_quant.levels() as i64 * a * self.fan_in() as i64
    }

    pub fn is_ternary(&self) -> bool {
        self.weight_quant.levels() == 1
    }

    pub fn rule(&self, s: i64) -> i32 {
        float_rule(self.k, &self.output_quant, s)
    }

    /// Every reachable `S` whose binned code differs from the float rule.
    pub fn scan(&self) -> Vec<i64> {
        let b = self.s_bound();
        (-b..=b).filter(|&s| self.thresholds.bin(s) != self.rule(s)).collect()
    }

    /// Integer MAC and binning on `[B, C_in, ...]` codes.
    pub fn apply(&self, shape: &[usize], codes: &[i32], ops: &mut OpCount) -> Result<(Vec<usize>, Vec<i32>)> {
        let (out_shape, acc) = self.accumulate(shape, codes, ops)?;
        Ok((out_shape, acc.iter().map(|&s| self.thresholds.bin(s)).collect()))
    }

    /// Raw accumulators `S`.
    pub fn accumulate(&self, shape: &[usize], codes: &[i32], ops: &mut OpCount) -> Result<(Vec<usize>, Vec<i64>)> {
        if self.is_ternary() {
            self.run::<AddSub>(shape, codes, ops)
        } else {
            self.run::<Multiply>(shape, codes, ops)
        }
    }

    fn run<M: Mac>(&self, shape: &[usize], x: &[i32], ops: &mut OpCount) -> Result<(Vec<usize>, Vec<i64>)> {
        let ws = &self.weight_shape;
        let (c_out, c_in) = (ws[0], ws[1]);
        let bad = |d: String| Error::shape("integer_forward", "input", d);
        if shape.len() != ws.len() || shape[1] != c_in {
            return Err(bad(format!("plan '{}' expects [B, {c_in}, ...], got {shape:?}", self.name)));
        }
        let batch = shape[0];
        match self.geometry {
            ConvGeometry::Conv1d { dilation, padding } => {
                let (len, taps) = (shape[2], ws[2]);
                let lo = len
                    .checked_add(2 * padding)
                    .zip(dilation.checked_mul(taps - 1))
                    .and_then(|(a, b)| a.checked_sub(b))
                    .filter(|&l| l > 0)
                    .ok_or_else(|| bad(format!("length {len} shorter than the dilated kernel")))?;
                let mut out = vec![0i64; batch * c_out * lo];
                for b in 0..batch {
                    for co in 0..c_out {
                        for t in 0..lo {
                            let mut acc = 0i64;
                            for ci in 0..c_in {
                                let xr = &x[(b * c_in + ci) * len..][..len];
                                for k in 0..taps {
                                    let i = (t + k * dilation) as isize - padding as isize;
                                    if i >= 0 && (i as usize) < len {
                                        M::mac(&mut acc, self.weights[(co * c_in + ci) * taps + k], xr[i as usize], ops);
                                    }
                                }
                            }
                            out[(b * c_out + co) * lo + t] = acc;
                        }
                    }
                }
                Ok((vec![batch, c_out, lo], out))
            }
            ConvGeometry::Conv2d { stride, padding } => {
                let (h, w, kh, kw) = (shape[2], shape[3], ws[2], ws[3]);
                let ho = (h + 2 * padding).checked_sub(kh).map(|v| v / stride + 1);
                let wo = (w + 2 * padding).checked_sub(kw).map(|v| v / stride + 1);
                let (ho, wo) = ho.zip(wo).ok_or_else(|| bad(format!("input {h}x{w} smaller than kernel")))?;
                let mut out = vec![0i64; batch * c_out * ho * wo];
                for b in 0..batch {
                    for co in 0..c_out {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let mut acc = 0i64;
                                for ci in 0..c_in {
                                    let plane = &x[(b * c_in + ci) * h * w..][..h * w];
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy as usize >= h {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - padding as isize;
                                            if ix >= 0 && (ix as usize) < w {
                                                let wv = self.weights[((co * c_in + ci) * kh + ky) * kw + kx];
                                                M::mac(&mut acc, wv, plane[iy as usize * w + ix as usize], ops);
                                            }
                                        }
                                    }
                                }
                                out[((b * c_out + co) * ho + oy) * wo + ox] = acc;
                            }
                        }
                    }
                }
                Ok((vec![batch, c_out, ho, wo], out))
            }
        }
    }
}

/// Code-to-code map between two quantizer grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequantPlan {
    pub input_quant: QuantConfig,
    pub output_quant: QuantConfig,
    #[serde(skip)]
    pub thresholds: ThresholdPlan,
}

impl RequantPlan {
    pub fn new(input: QuantConfig, output: QuantConfig) -> Self {
        let (lo, hi) = input.code_bounds();
        let (olo, ohi) = output.code_bounds();
        let thresholds = compile_thresholds(|c| requant_rule(&input, &output, c), lo as i64, hi as i64, olo, ohi);
        RequantPlan {
            input_quant: input,
            output_quant: output,
            thresholds,
        }
    }

    pub fn scan(&self) -> Vec<i64> {
        let (lo, hi) = self.input_quant.code_bounds();
        (lo as i64..=hi as i64)
            .filter(|&c| self.thresholds.bin(c) != requant_rule(&self.input_quant, &self.output_quant, c))
            .collect()
    }
}

fn requant_rule(input: &QuantConfig, output: &QuantConfig, c: i64) -> i32 {
    let v = quant::dequantize(c as i32, input.scale(), input.levels());
    quant::code_of(v, output.scale(), output.lower.value(), output.levels())
}

/// One entry per source-network node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Input,
    /// Full-precision op (dense, pooling); code inputs are dequantized.
    Float { layer: Layer, inputs: Vec<usize> },
    /// Float tensor to codes.
    Entry { input: usize, quant: QuantConfig },
    /// Convolution fused with its output quantizer.
    Conv { input: usize, plan: IntegerLayerPlan },
    Requant { input: usize, plan: RequantPlan },
    /// Residual join: `clip(a + b)` on a shared grid.
    AddClip { a: usize, b: usize, quant: QuantConfig },
    /// Quantizer already applied by the fused producer.
    Alias { input: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegerModel {
    pub input_shape: Vec<usize>,
    pub names: Vec<String>,
    pub steps: Vec<Step>,
    /// Parameters of the float steps.
    pub params: ParamStore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Float,
    Codes(QuantConfig),
}

fn sole_quant(net: &Network, i: usize) -> Option<(usize, QuantConfig)> {
    match net.consumers(i).as_slice() {
        [q] => net.quant_config(*q).map(|c| (*q, c)),
        _ => None,
    }
}

fn same_grid(a: &QuantConfig, b: &QuantConfig) -> bool {
    a.levels() == b.levels() && a.log_scale.to_bits() == b.log_scale.to_bits()
}

/// Compiles a convolution node whose output feeds `out`.
pub fn compile_layer(net: &Network, conv: usize, input: QuantConfig, out: QuantConfig) -> Result<IntegerLayerPlan> {
    let node = &net.nodes[conv];
    let err = |m: String| Error::Compile(format!("node '{}': {m}", node.name));
    let (weight, geometry) = match &node.layer {
        Layer::Conv1d { weight, dilation, padding, .. } => (*weight, ConvGeometry::Conv1d { dilation: *dilation, padding: *padding }),
        Layer::Conv2d { weight, stride, padding, .. } => (*weight, ConvGeometry::Conv2d { stride: *stride, padding: *padding }),
        _ => return Err(err("not a convolution".into())),
    };
    let wq = net.weight_quant_config(conv).ok_or_else(|| err("convolution has no weight quantizer".into()))?;
    for (what, c) in [("weight", &wq), ("input", &input), ("output", &out)] {
        if !c.log_scale.is_finite() {
            return Err(err(format!("{what} log-scale is not a finite frozen value")));
        }
    }
    if wq.levels() > 127 {
        return Err(err(format!("{}-bit weights do not fit 8-bit codes", wq.bits)));
    }
    let master = &net.params.get(weight).tensor;
    let weights: Vec<i8> = quant::to_integer_codes(master, &wq).codes.into_iter().map(|c| c as i8).collect();
    let k = quant::mac_scale(wq.scale(), wq.levels(), input.scale(), input.levels());
    let fan_in: usize = master.shape()[1..].iter().product();
    let mut plan = IntegerLayerPlan {
        name: node.name.clone(),
        geometry,
        weight_shape: master.shape().to_vec(),
        weights,
        weight_quant: wq,
        input_quant: input,
        output_quant: out,
        k,
        thresholds: ThresholdPlan {
            lo_code: 0,
            thresholds: vec![],
        },
        acc_bits: accumulator_bits(wq.levels(), input.levels(), fan_in),
    };
    if plan.acc_bits > 63 {
        return Err(err(format!("accumulator needs {} bits", plan.acc_bits)));
    }
    let b = plan.s_bound();
    let (lo, hi) = out.code_bounds();
    plan.thresholds = compile_thresholds(|s| float_rule(k, &out, s), -b, b, lo, hi);
    Ok(plan)
}

pub fn compile_model(net: &Network) -> Result<IntegerModel> {
    if net.mode != Mode::Fq {
        return Err(Error::Compile(format!("integer compilation needs an fq network, got {:?}", net.mode)));
    }
    let n = net.nodes.len();
    let mut kinds: Vec<Kind> = Vec::with_capacity(n);
    let mut steps: Vec<Step> = Vec::with_capacity(n);
    let mut fused = vec![None; n];
    let cerr = |node: &Node, m: &str| Error::Compile(format!("node '{}': {m}", node.name));

    for (i, node) in net.nodes.iter().enumerate() {
        let kind_of = |j: usize| kinds[j];
        let (step, kind) = match &node.layer {
            Layer::Input { .. } => (Step::Input, Kind::Float),
            Layer::Dense { .. } | Layer::GlobalAvgPool => (
                Step::Float {
                    layer: node.layer.clone(),
                    inputs: node.inputs.clone(),
                },
                Kind::Float,
            ),
            Layer::Conv1d { .. } | Layer::Conv2d { .. } => {
                let Kind::Codes(input) = kind_of(node.inputs[0]) else {
                    return Err(cerr(node, "convolution input is not quantized"));
                };
                let (q, out) = sole_quant(net, i).ok_or_else(|| cerr(node, "convolution must feed exactly one quantizer"))?;
                fused[q] = Some(i);
                let plan = compile_layer(net, i, input, out)?;
                (Step::Conv { input: node.inputs[0], plan }, Kind::Codes(out))
            }
            Layer::Add => {
                let (q, out) = sole_quant(net, i).ok_or_else(|| cerr(node, "residual add must feed exactly one quantizer"))?;
                for &j in &node.inputs {
                    match kind_of(j) {
                        Kind::Codes(c) if same_grid(&c, &out) => {}
                        _ => return Err(cerr(node, "residual operands must share the join quantizer's grid")),
                    }
                }
                fused[q] = Some(i);
                (
                    Step::AddClip {
                        a: node.inputs[0],
                        b: node.inputs[1],
                        quant: out,
                    },
                    Kind::Codes(out),
                )
            }
            Layer::Quant { .. } => {
                let cfg = net.quant_config(i).expect("quant node");
                let src = node.inputs[0];
                let step = match (fused[i], kind_of(src)) {
                    (Some(p), _) => Step::Alias { input: p },
                    (None, Kind::Float) => Step::Entry { input: src, quant: cfg },
                    (None, Kind::Codes(c)) => Step::Requant {
                        input: src,
                        plan: RequantPlan::new(c, cfg),
                    },
                };
                (step, Kind::Codes(cfg))
            }
            Layer::BatchNorm { .. } | Layer::Relu => return Err(cerr(node, "BN and ReLU must be removed before compilation")),
        };
        steps.push(step);
        kinds.push(kind);
    }
    if kinds[n - 1] != Kind::Float {
        return Err(Error::Compile("network must end in a full-precision op".into()));
    }
    // keep only the parameters float steps use
    let mut params = ParamStore::default();
    for step in &mut steps {
        if let Step::Float { layer, .. } = step {
            for id in layer.param_ids_mut() {
                let p = net.params.get(*id);
                *id = params.push(p.name.clone(), p.tensor.clone(), false, false);
            }
        }
    }
    Ok(IntegerModel {
        input_shape: net.input_shape().to_vec(),
        names: net.nodes.iter().map(|n| n.name.clone()).collect(),
        steps,
        params,
    })
}

#[derive(Clone, Debug)]
enum Reg {
    Float(NodeId),
    Codes { shape: Vec<usize>, codes: Vec<i32>, quant: QuantConfig },
}

/// Result of one integer inference run.
#[derive(Clone, Debug)]
pub struct IntegerOutput {
    /// `[B, K]` row-major class scores.
    pub logits: Vec<f32>,
    pub classes: usize,
    /// Codes produced at every quantizer node.
    pub codes: BTreeMap<usize, Vec<i32>>,
    pub ops: OpCount,
}

impl IntegerModel {
    pub fn plans(&self) -> impl Iterator<Item = (usize, &IntegerLayerPlan)> {
        self.steps.iter().enumerate().filter_map(|(i, s)| match s {
            Step::Conv { plan, .. } => Some((i, plan)),
            _ => None,
        })
    }

    /// Node index whose quantizer output step `i` produces.
    fn quant_node_of(&self, i: usize) -> usize {
        self.steps
            .iter()
            .position(|s| matches!(s, Step::Alias { input } if *input == i))
            .unwrap_or(i)
    }

    /// Reachable accumulator values whose binning disagrees with the float
    /// rule, per compiled layer (empty vectors mean exact).
    pub fn exhaustive_scan(&self) -> Vec<(String, usize, Vec<i64>)> {
        let mut out = Vec::new();
        for (i, s) in self.steps.iter().enumerate() {
            match s {
                Step::Conv { plan, .. } => out.push((self.names[i].clone(), (2 * plan.s_bound() + 1) as usize, plan.scan())),
                Step::Requant { plan, .. } => {
                    let (lo, hi) = plan.input_quant.code_bounds();
                    out.push((self.names[i].clone(), (hi - lo + 1) as usize, plan.scan()));
                }
                _ => {}
            }
        }
        out
    }

    fn exec(&self, i: usize, tape: &mut Tape, regs: &[Reg], input: &Tensor, ops: &mut OpCount) -> Result<Reg> {
        let codes_of = |j: usize| -> Result<(&[usize], &[i32], QuantConfig)> {
            match &regs[j] {
                Reg::Codes { shape, codes, quant } => Ok((shape, codes, *quant)),
                _ => Err(Error::Compile(format!("step {i} expects codes from step {j}"))),
            }
        };
        Ok(match &self.steps[i] {
            Step::Input => Reg::Float(tape.leaf(input)),
            Step::Float { layer, inputs } => {
                let mut ids = Vec::with_capacity(inputs.len());
                for &j in inputs {
                    ids.push(float_node(tape, &regs[j])?);
                }
                let out = match layer {
                    Layer::Dense { weight, bias } => {
                        let w = tape.leaf(&self.params.get(*weight).tensor);
                        let b = bias.map(|b| tape.leaf(&self.params.get(b).tensor));
                        tape.dense(ids[0], w, b)?
                    }
                    Layer::GlobalAvgPool => tape.global_avg_pool(ids[0])?,
                    other => return Err(Error::Compile(format!("unsupported float step {}", other.kind()))),
                };
                Reg::Float(out)
            }
            Step::Entry { input, quant } => {
                let id = float_node(tape, &regs[*input])?;
                let (scale, lower, n) = (quant.scale(), quant.lower.value(), quant.levels());
                Reg::Codes {
                    shape: tape.shape(id).to_vec(),
                    codes: tape.value(id).iter().map(|&v| quant::code_of(v, scale, lower, n)).collect(),
                    quant: *quant,
                }
            }
            Step::Conv { input, plan } => {
                let (shape, codes, _) = codes_of(*input)?;
                let (shape, codes) = plan.apply(shape, codes, ops)?;
                Reg::Codes {
                    shape,
                    codes,
                    quant: plan.output_quant,
                }
            }
            Step::Requant { input, plan } => {
                let (shape, codes, _) = codes_of(*input)?;
                Reg::Codes {
                    shape: shape.to_vec(),
                    codes: codes.iter().map(|&c| plan.thresholds.bin(c as i64)).collect(),
                    quant: plan.output_quant,
                }
            }
            Step::AddClip { a, b, quant } => {
                let (sa, ca, _) = codes_of(*a)?;
                let (sb, cb, _) = codes_of(*b)?;
                if sa != sb {
                    return Err(Error::shape("integer_forward", "residual operands", format!("{sa:?} vs {sb:?}")));
                }
                let (lo, hi) = quant.code_bounds();
                ops.adds += ca.len() as u64;
                Reg::Codes {
                    shape: sa.to_vec(),
                    codes: ca.iter().zip(cb).map(|(&x, &y)| (x + y).clamp(lo, hi)).collect(),
                    quant: *quant,
                }
            }
            Step::Alias { input } => regs[*input].clone(),
        })
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::shape("integer_forward", "input", format!("expected [B, {:?}], got {s:?}", self.input_shape)));
        }
        Ok(())
    }

    fn finish(&self, tape: &Tape, regs: &[Reg], ops: OpCount) -> Result<IntegerOutput> {
        let Some(Reg::Float(out)) = regs.last() else {
            return Err(Error::Compile("model output is not a float tensor".into()));
        };
        let codes = regs
            .iter()
            .enumerate()
            .filter_map(|(i, r)| match (r, &self.steps[i]) {
                (Reg::Codes { codes, .. }, Step::Entry { .. } | Step::Requant { .. } | Step::AddClip { .. } | Step::Alias { .. }) => {
                    Some((self.quant_node_of(i), codes.clone()))
                }
                _ => None,
            })
            .collect();
        Ok(IntegerOutput {
            logits: tape.value(*out).to_vec(),
            classes: tape.shape(*out)[1],
            codes,
            ops,
        })
    }

    /// Float head, integer body, float tail on `[B, ...input_shape]`.
    pub fn forward(&self, input: &Tensor) -> Result<IntegerOutput> {
        self.check_input(input)?;
        let mut tape = Tape::no_grad();
        let mut regs: Vec<Reg> = Vec::with_capacity(self.steps.len());
        let mut ops = OpCount::default();
        for i in 0..self.steps.len() {
            let r = self.exec(i, &mut tape, &regs, input, &mut ops)?;
            regs.push(r);
        }
        self.finish(&tape, &regs, ops)
    }
}

fn float_node(tape: &mut Tape, r: &Reg) -> Result<NodeId> {
    match r {
        Reg::Float(id) => Ok(*id),
        Reg::Codes { shape, codes, quant } => {
            let (scale, n) = (quant.scale(), quant.levels());
            tape.constant(shape.clone(), codes.iter().map(|&c| quant::dequantize(c, scale, n)).collect())
        }
    }
}

pub fn integer_forward(model: &IntegerModel, input: &Tensor) -> Result<IntegerOutput> {
    model.forward(input)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDiscrepancy {
    pub node: String,
    /// Largest |integer code − float code| with the float path's inputs.
    pub isolated: i32,
    /// Same, with the integer model's own upstream codes.
    pub end_to_end: i32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub layers: Vec<LayerDiscrepancy>,
    /// Reachable accumulator values checked and mismatches found, per plan.
    pub scan: Vec<(String, usize, usize)>,
    pub argmax_agreement: f32,
    pub max_logit_rel_err: f32,
}

impl EquivalenceReport {
    pub fn ok(&self) -> bool {
        self.layers.iter().all(|l| l.isolated == 0 && l.end_to_end == 0)
            && self.scan.iter().all(|s| s.2 == 0)
            && self.argmax_agreement == 1.0
    }
}

/// Compares the integer model with the fake-quant float path of `net` on
/// `input`, layer by layer and at the output.
pub fn verify_equivalence(model: &IntegerModel, net: &Network, input: &Tensor) -> Result<EquivalenceReport> {
    model.check_input(input)?;
    let pass = net.forward(input, false, None)?;
    if pass.outputs.len() != model.steps.len() {
        return Err(Error::Equivalence("model and network have different node counts".into()));
    }
    let float_codes: BTreeMap<usize, Vec<i32>> = net.activation_codes(&pass).into_iter().collect();
    let int_out = model.forward(input)?;

    // Registers seeded from the float path, for per-layer isolation.
    let mut tape = Tape::no_grad();
    let mut forced: Vec<Reg> = Vec::with_capacity(model.steps.len());
    for &id in &pass.outputs {
        let t = pass.tape.to_tensor(id);
        forced.push(match pass.tape.grid(id) {
            Some(g) => Reg::Codes {
                shape: t.shape().to_vec(),
                codes: g.codes.clone(),
                // only read by float steps, which are never run seeded
                quant: QuantConfig {
                    bits: (g.levels + 1).trailing_zeros() + 1,
                    lower: LowerBound::from_value(g.lower).unwrap_or(LowerBound::Signed),
                    log_scale: g.scale.ln(),
                },
            },
            None => Reg::Float(tape.leaf(&t)),
        });
    }
    let mut layers = Vec::new();
    let mut ops = OpCount::default();
    for (i, step) in model.steps.iter().enumerate() {
        if !matches!(step, Step::Entry { .. } | Step::Conv { .. } | Step::Requant { .. } | Step::AddClip { .. }) {
            continue;
        }
        let q = model.quant_node_of(i);
        let reference = float_codes
            .get(&q)
            .ok_or_else(|| Error::Equivalence(format!("float path has no codes at node '{}'", model.names[q])))?;
        let isolated = match model.exec(i, &mut tape, &forced, input, &mut ops)? {
            Reg::Codes { codes, .. } => max_diff(&codes, reference),
            _ => i32::MAX,
        };
        let end_to_end = int_out.codes.get(&q).map_or(i32::MAX, |c| max_diff(c, reference));
        layers.push(LayerDiscrepancy {
            node: model.names[q].clone(),
            isolated,
            end_to_end,
        });
    }
    let scan = model
        .exhaustive_scan()
        .into_iter()
        .map(|(name, checked, bad)| (name, checked, bad.len()))
        .collect();
    let ref_logits = pass.tape.value(pass.logits);
    let k = int_out.classes;
    let rows = ref_logits.len() / k;
    let agree = ref_logits
        .chunks(k)
        .zip(int_out.logits.chunks(k))
        .filter(|(a, b)| crate::train::argmax(a) == crate::train::argmax(b))
        .count();
    let rel = ref_logits
        .iter()
        .zip(&int_out.logits)
        .map(|(a, b)| ((a - b).abs() / a.abs().max(1e-12)).min(if a == b { 0.0 } else { f32::INFINITY }))
        .fold(0.0f32, f32::max);
    Ok(EquivalenceReport {
        samples: rows,
        layers,
        scan,
        argmax_agreement: agree as f32 / rows.max(1) as f32,
        max_logit_rel_err: rel,
    })
}

fn max_diff(a: &[i32], b: &[i32]) -> i32 {
    if a.len() != b.len() {
        return i32::MAX;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(bits: u32, lower: LowerBound, s: f32) -> QuantConfig {
        QuantConfig::new(bits, lower, s).unwrap()
    }

    #[test]
    fn unit_slope_staircase() {
        // k·n_out/e^{s_out} = 1 with e^s = 1: S maps to itself, clipped
        let out = cfg(4, LowerBound::Signed, 0.0);
        let k = 1.0 / 7.0;
        let plan = compile_thresholds(|s| float_rule(k, &out, s), -20, 20, -7, 7);
        assert_eq!(plan.thresholds, (-6..=7).collect::<Vec<i64>>());
        for s in -20..=20i64 {
            assert_eq!(plan.bin(s) as i64, s.clamp(-7, 7));
        }
    }

    #[test]
    fn accumulator_width() {
        assert_eq!(accumulator_bits(1, 7, 135), 11);
        assert_eq!(accumulator_bits(1, 1, 1), 2);
    }

    #[test]
    fn unreachable_codes_get_sentinel() {
        let out = cfg(3, LowerBound::Unsigned, 0.0);
        let plan = compile_thresholds(|_| 0, -4, 4, 0, 3);
        assert_eq!(plan.thresholds, vec![5, 5, 5]);
        assert_eq!(plan.bin(4), 0);
        let _ = out;
    }
}
