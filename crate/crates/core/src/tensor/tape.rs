//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so every operation's inputs
//! precede it and a single reverse sweep visits each node once.

use super::kernels::{self, Conv1dGeom, Conv2dGeom, DenseGeom};
use super::{check_distribution, conv1d_geom, conv2d_geom, Tensor};
use crate::error::{Error, Result};
use crate::quant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Integer view of a tensor whose values lie on a quantizer grid:
/// `value[i] == quant::dequantize(codes[i], scale, levels)` bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub scale: f32,
    pub levels: u32,
    pub lower: f32,
    pub codes: Vec<i32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { x: NodeId, w: NodeId, geom: Conv1dGeom },
    Conv2d { x: NodeId, w: NodeId, geom: Conv2dGeom },
    Dense { x: NodeId, w: NodeId, b: Option<NodeId>, geom: DenseGeom },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f32>, inv_std: Vec<f32>, channels: usize, spatial: usize },
    ChannelAffine { x: NodeId, scale: Vec<f32>, channels: usize, spatial: usize },
    Relu { x: NodeId },
    Quantize { x: NodeId, s: NodeId, lower: f32 },
    Add { a: NodeId, b: NodeId },
    AddConst { x: NodeId },
    Scale { x: NodeId, c: f32 },
    GlobalAvgPool { x: NodeId, spatial: usize },
    SoftmaxCe { logits: NodeId, targets: Vec<f32>, probs: Vec<f32>, k: usize },
    Sum { x: NodeId },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    grid: Option<Grid>,
    op: Op,
    tracked: bool,
}

/// Recorded computation. Values are immutable once pushed.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f32>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape that never tracks gradients; used for evaluation passes.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grid(&self, id: NodeId) -> Option<&Grid> {
        self.nodes[id.0].grid.as_ref()
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid tensors")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, inputs: &[NodeId]) -> NodeId {
        let tracked = !self.no_grad && inputs.iter().any(|i| self.nodes[i.0].tracked);
        self.push_raw(shape, value, None, op, tracked)
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Vec<f32>, grid: Option<Grid>, op: Op, tracked: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grid,
            op,
            tracked,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf; tracked when it requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let tracked = !self.no_grad && t.requires_grad();
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), None, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f32>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape("constant", "shape", format!("{shape:?} vs {} values", value.len())));
        }
        Ok(self.push_raw(shape, value, None, Op::Leaf, false))
    }

    fn rank(&self, op: &'static str, id: NodeId, rank: usize) -> Result<&[usize]> {
        let s = self.shape(id);
        if s.len() != rank {
            return Err(Error::shape(op, "input rank", format!("expected rank {rank}, got {s:?}")));
        }
        Ok(s)
    }

    /// Batched conv1d on `[B, C_in, L]`. When both operands carry grids the
    /// accumulation runs over integer codes and is scaled once.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, dilation: usize, padding: usize) -> Result<NodeId> {
        let xs = self.rank("conv1d", x, 3)?.to_vec();
        let geom = conv1d_geom("conv1d", &xs[1..], xs[0], self.shape(w), dilation, padding)?;
        let lo = geom.out_len().unwrap();
        let n = geom.batch * geom.c_out * lo;
        let value = match (self.grid(x), self.grid(w)) {
            (Some(gx), Some(gw)) => {
                let mut acc = vec![0i64; n];
                kernels::conv1d_codes(&geom, &gx.codes, &gw.codes, &mut acc);
                let k = quant::mac_scale(gw.scale, gw.levels, gx.scale, gx.levels);
                acc.iter().map(|&s| quant::mac_to_real(k, s)).collect()
            }
            _ => {
                let mut out = vec![0.0; n];
                kernels::conv1d_forward(&geom, self.value(x), self.value(w), &mut out);
                out
            }
        };
        Ok(self.push(vec![geom.batch, geom.c_out, lo], value, Op::Conv1d { x, w, geom }, &[x, w]))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let xs = self.rank("conv2d", x, 4)?.to_vec();
        let geom = conv2d_geom("conv2d", &xs[1..], xs[0], self.shape(w), stride, padding)?;
        let (ho, wo) = geom.out_hw().unwrap();
        let n = geom.batch * geom.c_out * ho * wo;
        let value = match (self.grid(x), self.grid(w)) {
            (Some(gx), Some(gw)) => {
                let mut acc = vec![0i64; n];
                kernels::conv2d_codes(&geom, &gx.codes, &gw.codes, &mut acc);
                let k = quant::mac_scale(gw.scale, gw.levels, gx.scale, gx.levels);
                acc.iter().map(|&s| quant::mac_to_real(k, s)).collect()
            }
            _ => {
                let mut out = vec![0.0; n];
                kernels::conv2d_forward(&geom, self.value(x), self.value(w), &mut out);
                out
            }
        };
        Ok(self.push(vec![geom.batch, geom.c_out, ho, wo], value, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Dense layer on `[B, N]`, or frame-wise on `[B, N, L]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if !(xs.len() == 2 || xs.len() == 3) || ws.len() != 2 {
            return Err(Error::shape("dense", "rank", format!("input {xs:?}, weights {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape("dense", "weights N vs input N", format!("{} != {}", ws[1], xs[1])));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("dense", "bias M", format!("{:?} vs {}", self.shape(b), ws[0])));
            }
        }
        let frames = if xs.len() == 3 { xs[2] } else { 1 };
        let geom = DenseGeom {
            batch: xs[0],
            n_in: ws[1],
            n_out: ws[0],
            frames,
        };
        let mut out = vec![0.0; geom.batch * geom.n_out * frames];
        kernels::dense_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)), &mut out);
        let mut shape = vec![geom.batch, geom.n_out];
        if xs.len() == 3 {
            shape.push(frames);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(shape, out, Op::Dense { x, w, b, geom }, &inputs))
    }

    /// Training-mode batch normalization over `[B, C, ...]` using minibatch
    /// statistics. Returns the output node plus the batch mean and unbiased
    /// variance for running-statistics updates.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> Result<(NodeId, Vec<f32>, Vec<f32>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", "rank", format!("need [B, C, ...], got {xs:?}")));
        }
        if xs[0] < 2 {
            return Err(Error::Usage("batch_norm: training mode needs a minibatch of at least 2".into()));
        }
        let (b, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", "gamma/beta C", format!("expected [{c}]")));
        }
        let count = (b * spatial) as f64;
        let xv = self.value(x);
        let mut mean = vec![0.0f32; c];
        let mut var_unbiased = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for bi in 0..b {
                s += xv[(bi * c + ch) * spatial..][..spatial].iter().map(|&v| v as f64).sum::<f64>();
            }
            let m = s / count;
            let mut ss = 0.0f64;
            for bi in 0..b {
                ss += xv[(bi * c + ch) * spatial..][..spatial]
                    .iter()
                    .map(|&v| (v as f64 - m).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = m as f32;
            inv_std[ch] = (1.0 / (ss / count + eps as f64).sqrt()) as f32;
            var_unbiased[ch] = (ss / (count - 1.0).max(1.0)) as f32;
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels: c,
            spatial,
        };
        Ok((self.push(xs, out, op, &[x, gamma, beta]), mean, var_unbiased))
    }

    /// `scale[c] * x + shift[c]` per channel, with constant coefficients.
    pub fn channel_affine(&mut self, x: NodeId, scale: &[f32], shift: &[f32]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || scale.len() != xs[1] || shift.len() != xs[1] {
            return Err(Error::shape("channel_affine", "C", format!("input {xs:?}, {} coefficients", scale.len())));
        }
        let (b, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let xv = self.value(x);
        let mut out = vec![0.0f32; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * spatial;
                for i in off..off + spatial {
                    out[i] = scale[ch] * xv[i] + shift[ch];
                }
            }
        }
        let op = Op::ChannelAffine {
            x,
            scale: scale.to_vec(),
            channels: c,
            spatial,
        };
        Ok(self.push(xs, out, op, &[x]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu { x }, &[x])
    }

    /// Learned quantization `e^s · quantize(x / e^s)` with a straight-through
    /// backward pass. `s` is a one-element node.
    pub fn quantize(&mut self, x: NodeId, s: NodeId, lower: f32, levels: u32) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("quantize", "s", "log-scale must be a single value"));
        }
        let scale = self.value(s)[0].exp();
        let codes: Vec<i32> = self
            .value(x)
            .iter()
            .map(|&v| quant::code_of(v, scale, lower, levels))
            .collect();
        // NaN inputs stay NaN so divergence reaches the loss
        let value = codes
            .iter()
            .zip(self.value(x))
            .map(|(&c, &v)| if v.is_nan() { v } else { quant::dequantize(c, scale, levels) })
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = !self.no_grad && (self.nodes[x.0].tracked || self.nodes[s.0].tracked);
        let grid = Grid {
            scale,
            levels,
            lower,
            codes,
        };
        Ok(self.push_raw(shape, value, Some(grid), Op::Quantize { x, s, lower }, tracked))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", "operands", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a constant perturbation; the gradient passes through unchanged.
    pub fn add_const(&mut self, x: NodeId, delta: &[f32]) -> Result<NodeId> {
        if delta.len() != self.value(x).len() {
            return Err(Error::shape("add_const", "operands", format!("{} vs {}", self.value(x).len(), delta.len())));
        }
        let out = self.value(x).iter().zip(delta).map(|(x, d)| x + d).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddConst { x }, &[x]))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, c }, &[x])
    }

    /// `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape("global_avg_pool", "rank", format!("need [B, C, ...spatial], got {xs:?}")));
        }
        let spatial: usize = xs[2..].iter().product();
        let rows = xs[0] * xs[1];
        let mut out = vec![0.0; rows];
        kernels::global_avg_pool(self.value(x), rows, spatial, &mut out);
        Ok(self.push(vec![xs[0], xs[1]], out, Op::GlobalAvgPool { x, spatial }, &[x]))
    }

    /// Mean over the batch of `−Σ_k t_k log softmax(z)_k`. `targets` is
    /// row-major `[B, K]`, each row a probability vector.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[f32]) -> Result<NodeId> {
        let ls = self.rank("softmax_cross_entropy", logits, 2)?.to_vec();
        let (b, k) = (ls[0], ls[1]);
        if targets.len() != b * k {
            return Err(Error::shape("softmax_cross_entropy", "targets", format!("expected {}x{}", b, k)));
        }
        for row in targets.chunks(k) {
            check_distribution(row)?;
        }
        let z = self.value(logits);
        let mut probs = vec![0.0f32; b * k];
        let mut loss = 0.0f64;
        for bi in 0..b {
            let zr = &z[bi * k..][..k];
            let lsm = super::log_softmax_f64(zr);
            for j in 0..k {
                probs[bi * k + j] = lsm[j].exp() as f32;
                let t = targets[bi * k + j];
                if t != 0.0 {
                    loss -= t as f64 * lsm[j];
                }
            }
        }
        let value = vec![(loss / b as f64) as f32];
        let op = Op::SoftmaxCe {
            logits,
            targets: targets.to_vec(),
            probs,
            k,
        };
        Ok(self.push(vec![1], value, op, &[logits]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        self.push(vec![1], vec![s as f32], Op::Sum { x }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Gradients of nodes used more than
    /// once accumulate.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back to every tracked node.
    pub fn backward_from(&self, output: NodeId, seed: Vec<f32>) -> Result<Gradients> {
        if seed.len() != self.nodes[output.0].value.len() {
            return Err(Error::shape(
                "backward_from",
                "seed",
                format!("{} values for output shape {:?}", seed.len(), self.nodes[output.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], id: NodeId) -> Option<&'g mut Vec<f32>> {
        let node = &self.nodes[id.0];
        if !node.tracked {
            return None;
        }
        let len = node.value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::conv1d_backward(geom, xv, wv, gy, Some(gx), None);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    kernels::conv1d_backward(geom, xv, wv, gy, None, Some(gw));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::conv2d_backward(geom, xv, wv, gy, Some(gx), None);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    kernels::conv2d_backward(geom, xv, wv, gy, None, Some(gw));
                }
            }
            Op::Dense { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::dense_backward(geom, xv, wv, gy, Some(gx), None, None);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    kernels::dense_backward(geom, xv, wv, gy, None, Some(gw), None);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        kernels::dense_backward(geom, xv, wv, gy, None, None, Some(gb));
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, channels, spatial } => {
                let (c, sp) = (*channels, *spatial);
                let b = gy.len() / (c * sp);
                let n = (b * sp) as f32;
                let mut dbeta = vec![0.0f32; c];
                let mut dgamma = vec![0.0f32; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * sp;
                        for i in off..off + sp {
                            dbeta[ch] += gy[i];
                            dgamma[ch] += gy[i] * xhat[i];
                        }
                    }
                }
                let gv = self.value(*gamma);
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for ch in 0..c {
                            let coef = gv[ch] * inv_std[ch] / n;
                            let off = (bi * c + ch) * sp;
                            for i in off..off + sp {
                                gx[i] += coef * (n * gy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    gg.iter_mut().zip(&dgamma).for_each(|(a, d)| *a += d);
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    gb.iter_mut().zip(&dbeta).for_each(|(a, d)| *a += d);
                }
            }
            Op::ChannelAffine { x, scale, channels, spatial } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, g) in gx.iter_mut().enumerate() {
                        *g += scale[(i / spatial) % channels] * gy[i];
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, &v), &up) in gx.iter_mut().zip(xv).zip(gy) {
                        if v > 0.0 {
                            *g += up;
                        }
                    }
                }
            }
            Op::Quantize { x, s, lower } => {
                let scale = self.value(*s)[0].exp();
                let xv = self.value(*x);
                let (gxs, gss) = quant::ste_backward(gy, xv, scale, *lower);
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(&gxs).for_each(|(a, d)| *a += d);
                }
                if let Some(g) = self.slot(grads, *s) {
                    g[0] += gss;
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(g) = self.slot(grads, *id) {
                        g.iter_mut().zip(gy).for_each(|(a, d)| *a += d);
                    }
                }
            }
            Op::AddConst { x } => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().zip(gy).for_each(|(a, d)| *a += d);
                }
            }
            Op::Scale { x, c } => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().zip(gy).for_each(|(a, d)| *a += c * d);
                }
            }
            Op::GlobalAvgPool { x, spatial } => {
                if let Some(g) = self.slot(grads, *x) {
                    let inv = 1.0 / *spatial as f32;
                    for (i, gv) in g.iter_mut().enumerate() {
                        *gv += gy[i / spatial] * inv;
                    }
                }
            }
            Op::SoftmaxCe { logits, targets, probs, k } => {
                if let Some(g) = self.slot(grads, *logits) {
                    let b = probs.len() / k;
                    let coef = gy[0] / b as f32;
                    for i in 0..probs.len() {
                        g[i] += coef * (probs[i] - targets[i]);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().for_each(|a| *a += gy[0]);
                }
            }
        }
    }
}
