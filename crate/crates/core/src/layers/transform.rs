use super::bn::{absorb_bn_scale, bn_fold};
use super::{Layer, Mode, Network, Node, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::quant::{levels_for_bits, LowerBound, QuantConfig};
use crate::tensor::Tensor;

/// Switches an fp network to fake-quant mode. Every log-scale starts at
/// `ln(max|x|)` of the tensor it quantizes, measured on `calib`.
pub fn attach_quantizers(net: &Network, calib: &Tensor, weight_bits: u32, act_bits: u32) -> Result<Network> {
    if net.mode != Mode::Fp {
        return Err(Error::Usage("attach_quantizers expects an fp network".into()));
    }
    let mut out = set_bitwidths(net, weight_bits, act_bits)?;
    let pass = net.forward(calib, false, None)?;
    for node in &net.nodes {
        match &node.layer {
            Layer::Quant { log_scale, .. } => {
                let x = pass.tape.value(pass.outputs[node.inputs[0]]);
                out.params.set_scalar(*log_scale, log_max_abs(x));
            }
            l if l.is_conv() => {
                if let Some(wq) = l.weight_quant() {
                    let w = net.params.get(conv_weight(l)).tensor.data();
                    out.params.set_scalar(wq.log_scale, log_max_abs(w));
                }
            }
            _ => {}
        }
    }
    out.mode = Mode::FakeQuant;
    Ok(out)
}

fn log_max_abs(x: &[f32]) -> f32 {
    let m = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if m > 0.0 && m.is_finite() {
        m.ln()
    } else {
        0.0
    }
}

fn conv_weight(l: &Layer) -> ParamId {
    match l {
        Layer::Conv1d { weight, .. } | Layer::Conv2d { weight, .. } => *weight,
        _ => unreachable!("conv layer"),
    }
}

/// Replaces every quantizer's bitwidth; log-scales are carried over.
pub fn set_bitwidths(net: &Network, weight_bits: u32, act_bits: u32) -> Result<Network> {
    levels_for_bits(weight_bits)?;
    levels_for_bits(act_bits)?;
    let mut out = net.clone();
    for node in &mut out.nodes {
        match &mut node.layer {
            Layer::Quant { bits, .. } => *bits = act_bits,
            Layer::Conv1d { weight_quant: Some(wq), .. } | Layer::Conv2d { weight_quant: Some(wq), .. } => wq.bits = weight_bits,
            _ => {}
        }
    }
    Ok(out)
}

/// Activation quantizers with no conv layer upstream, i.e. the ones that
/// quantize the network input or its full-precision embedding.
pub fn input_quantizers(net: &Network) -> Vec<usize> {
    let mut after_conv = vec![false; net.nodes.len()];
    let mut out = Vec::new();
    for (i, node) in net.nodes.iter().enumerate() {
        after_conv[i] = node.layer.is_conv() || node.inputs.iter().any(|&j| after_conv[j]);
        if matches!(node.layer, Layer::Quant { .. }) && !after_conv[i] {
            out.push(i);
        }
    }
    out
}

/// Sets the bitwidth of every [`input_quantizers`] node; scales are kept.
pub fn set_input_bits(net: &Network, bits: u32) -> Result<Network> {
    levels_for_bits(bits)?;
    let mut out = net.clone();
    for i in input_quantizers(net) {
        if let Layer::Quant { bits: b, .. } = &mut out.nodes[i].layer {
            *b = bits;
        }
    }
    Ok(out)
}

/// Removes BN and ReLU from a fake-quant network.
///
/// * conv → BN: per-channel `γ′` multiplies the conv weights, the channel
///   mean `ln(mean|γ′|)` is added to the weight quantizer's log-scale and
///   `β′` is dropped.
/// * dense → BN: folded exactly, `β′` included, since the dense layer keeps
///   a full-precision bias.
/// * ReLU feeding a quantizer disappears; that quantizer becomes `b = 0`.
///   A quantizer fed directly by a BN becomes `b = -1`.
/// * Both operands of a residual add are requantized (`b = -1`) on the
///   join quantizer's grid, sharing its log-scale, so the sum stays
///   integer-valued.
///
/// An fq network is returned unchanged.
pub fn replace_bn_relu(net: &Network) -> Result<Network> {
    match net.mode {
        Mode::Fq => return Ok(net.clone()),
        Mode::Fp => return Err(Error::Usage("replace_bn_relu needs a quantized network, got fp".into())),
        Mode::FakeQuant => {}
    }
    let mut params = net.params.clone();
    let mut nodes: Vec<Node> = Vec::with_capacity(net.nodes.len());
    let mut map = vec![usize::MAX; net.nodes.len()];
    let structure = |m: String| Error::Structure(m);

    for (i, node) in net.nodes.iter().enumerate() {
        let ins: Vec<usize> = node.inputs.iter().map(|&j| map[j]).collect();
        match &node.layer {
            Layer::BatchNorm { .. } => {
                let p = node.inputs[0];
                if net.consumers(p).len() != 1 {
                    return Err(structure(format!("BN '{}' shares its input with other nodes", node.name)));
                }
                let bn = net.bn_params(i).expect("bn node");
                let (gp, bp) = bn_fold(&bn)?;
                match &net.nodes[p].layer {
                    Layer::Conv1d { weight, weight_quant, .. } | Layer::Conv2d { weight, weight_quant, .. } => {
                        scale_rows(&mut params, *weight, &gp);
                        if let Some(wq) = weight_quant {
                            let cfg = QuantConfig::new(wq.bits, LowerBound::Signed, params.scalar(wq.log_scale))?;
                            let cfg = absorb_bn_scale(&cfg, &gp)?;
                            params.set_scalar(wq.log_scale, cfg.log_scale);
                        }
                    }
                    Layer::Dense { weight, bias } => {
                        scale_rows(&mut params, *weight, &gp);
                        let b = match bias {
                            Some(b) => *b,
                            None => return Err(structure(format!("dense '{}' before BN has no bias", net.nodes[p].name))),
                        };
                        for (o, v) in params.get_mut(b).tensor.data_mut().iter_mut().enumerate() {
                            *v = (gp[o] * *v as f64 + bp[o]) as f32;
                        }
                    }
                    other => {
                        return Err(structure(format!("BN '{}' follows a {} node", node.name, other.kind())));
                    }
                }
                map[i] = ins[0];
            }
            Layer::Relu => {
                let p = node.inputs[0];
                let src_ok = match &net.nodes[p].layer {
                    Layer::BatchNorm { .. } => net.nodes[net.nodes[p].inputs[0]].layer.is_conv(),
                    Layer::Add => true,
                    l => l.is_conv(),
                };
                if !src_ok {
                    return Err(structure(format!("ReLU '{}' is not preceded by a convolution", node.name)));
                }
                let cons = net.consumers(i);
                if cons.is_empty() || !cons.iter().all(|&c| matches!(net.nodes[c].layer, Layer::Quant { .. })) {
                    return Err(structure(format!("ReLU '{}' does not feed a quantizer", node.name)));
                }
                map[i] = ins[0];
            }
            Layer::Quant { bits, lower, log_scale } => {
                let lower = match net.nodes[node.inputs[0]].layer {
                    Layer::Relu => LowerBound::Unsigned,
                    Layer::BatchNorm { .. } => LowerBound::Signed,
                    _ => *lower,
                };
                nodes.push(Node {
                    name: node.name.clone(),
                    layer: Layer::Quant {
                        bits: *bits,
                        lower,
                        log_scale: *log_scale,
                    },
                    inputs: ins,
                });
                map[i] = nodes.len() - 1;
            }
            Layer::Add => {
                let (bits, log_scale) = join_quant(net, i)?;
                let mut req = Vec::with_capacity(2);
                for (k, &j) in ins.iter().enumerate() {
                    nodes.push(Node {
                        name: format!("{}.in{}", node.name, k),
                        layer: Layer::Quant {
                            bits,
                            lower: LowerBound::Signed,
                            log_scale,
                        },
                        inputs: vec![j],
                    });
                    req.push(nodes.len() - 1);
                }
                nodes.push(Node {
                    name: node.name.clone(),
                    layer: Layer::Add,
                    inputs: req,
                });
                map[i] = nodes.len() - 1;
            }
            other => {
                nodes.push(Node {
                    name: node.name.clone(),
                    layer: other.clone(),
                    inputs: ins,
                });
                map[i] = nodes.len() - 1;
            }
        }
    }
    let params = compact(&mut nodes, &params);
    Network::new(nodes, params, Mode::Fq)
}

/// Quantizer that consumes a residual add, possibly through a ReLU.
fn join_quant(net: &Network, add: usize) -> Result<(u32, ParamId)> {
    let mut cons = net.consumers(add);
    if let [r] = cons.as_slice() {
        if matches!(net.nodes[*r].layer, Layer::Relu) {
            cons = net.consumers(*r);
        }
    }
    match cons.as_slice() {
        [q] => match net.nodes[*q].layer {
            Layer::Quant { bits, log_scale, .. } => Ok((bits, log_scale)),
            _ => Err(Error::Structure(format!("add '{}' is not followed by a quantizer", net.nodes[add].name))),
        },
        _ => Err(Error::Structure(format!("add '{}' must have a single quantizer consumer", net.nodes[add].name))),
    }
}

/// Multiplies row `o` (output channel) of a weight tensor by `g[o]`.
fn scale_rows(params: &mut ParamStore, id: ParamId, g: &[f64]) {
    let t = &mut params.get_mut(id).tensor;
    let rows = t.shape()[0];
    let per = t.numel() / rows;
    for (o, row) in t.data_mut().chunks_mut(per).enumerate() {
        for v in row {
            *v = (*v as f64 * g[o]) as f32;
        }
    }
}

/// Drops parameters no node references and renumbers the rest in order.
fn compact(nodes: &mut [Node], params: &ParamStore) -> ParamStore {
    let mut remap = vec![None; params.len()];
    let mut out = ParamStore::default();
    for node in nodes.iter_mut() {
        for id in node.layer.param_ids_mut() {
            let new = *remap[*id].get_or_insert_with(|| {
                let p = params.get(*id);
                out.push(p.name.clone(), p.tensor.clone(), p.trainable, p.decay)
            });
            *id = new;
        }
    }
    out
}
