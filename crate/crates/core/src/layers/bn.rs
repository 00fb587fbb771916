use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantConfig;
use crate::tensor::Tape;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Batch-normalization state for one layer (per channel).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    /// False until running statistics have seen at least one batch.
    pub populated: bool,
}

impl BatchNormParams {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `σ̃ = sqrt(var + ε)`, positive by construction.
    pub fn running_std(&self) -> Vec<f64> {
        self.running_var.iter().map(|v| (v.max(0.0) + self.eps).sqrt()).collect()
    }
}

/// Training-mode BN on `[B, C, ...]` with EMA update of running statistics.
pub fn bn_forward_train(x: &Tensor, params: &mut BatchNormParams, momentum: f32) -> Result<Tensor> {
    let c = params.channels();
    if x.shape().len() < 2 || x.shape()[1] != c {
        return Err(Error::shape("bn_forward_train", "C", format!("input {:?}, {c} channels", x.shape())));
    }
    let mut tape = Tape::no_grad();
    let xi = tape.leaf(x);
    let g = tape.leaf(&Tensor::new(vec![c], params.gamma.iter().map(|&v| v as f32).collect())?);
    let b = tape.leaf(&Tensor::new(vec![c], params.beta.iter().map(|&v| v as f32).collect())?);
    let (y, mean, var) = tape.batch_norm(xi, g, b, params.eps as f32)?;
    update_running(params, &mean, &var, momentum);
    Ok(tape.to_tensor(y))
}

pub(crate) fn update_running(params: &mut BatchNormParams, mean: &[f32], var: &[f32], momentum: f32) {
    let m = momentum as f64;
    for ch in 0..params.channels() {
        params.running_mean[ch] = (1.0 - m) * params.running_mean[ch] + m * mean[ch] as f64;
        params.running_var[ch] = (1.0 - m) * params.running_var[ch] + m * var[ch] as f64;
    }
    params.populated = true;
}

/// Inference-mode BN of one value: `γ(x − μ̃)/σ̃ + β`.
pub fn bn_infer(x: f64, ch: usize, params: &BatchNormParams) -> f64 {
    let sigma = (params.running_var[ch].max(0.0) + params.eps).sqrt();
    params.gamma[ch] * (x - params.running_mean[ch]) / sigma + params.beta[ch]
}

/// Unevaluated sum `hi + lo`, normalized so that `hi = fl(hi + lo)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoubleF64 {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleF64 {
    pub fn new(x: f64) -> Self {
        DoubleF64 { hi: x, lo: 0.0 }
    }

    fn norm((hi, lo): (f64, f64)) -> Self {
        let (hi, lo) = fast_two_sum(hi, lo);
        DoubleF64 { hi, lo }
    }

    pub fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = fast_two_sum(s, e + t);
        Self::norm((s, e + f))
    }

    pub fn neg(self) -> Self {
        DoubleF64 { hi: -self.hi, lo: -self.lo }
    }

    pub fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        Self::norm((p, e + (self.hi * o.lo + self.lo * o.hi)))
    }

    pub fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self.add(o.mul(Self::new(q1)).neg());
        let q2 = r.hi / o.hi;
        let r = r.add(o.mul(Self::new(q2)).neg());
        let q3 = r.hi / o.hi;
        Self::norm((q1, q2)).add(Self::new(q3))
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::new(0.0);
        }
        let s = self.hi.sqrt();
        let (p, e) = two_prod(s, s);
        Self::norm((s, ((self.hi - p) - e + self.lo) / (2.0 * s)))
    }

    /// Nearest `f64`.
    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// Folded inference BN of one channel, `γ′x + β′`, with both coefficients
/// kept to about 104 bits so the result is faithfully rounded even when the
/// two terms nearly cancel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldedAffine {
    pub scale: DoubleF64,
    pub shift: DoubleF64,
}

impl FoldedAffine {
    pub fn apply(&self, x: f64) -> f64 {
        self.scale.mul(DoubleF64::new(x)).add(self.shift).value()
    }
}

/// `γ′ = γ/σ̃`, `β′ = β − γμ̃/σ̃` per channel.
pub fn bn_fold_affine(params: &BatchNormParams) -> Result<Vec<FoldedAffine>> {
    if !params.populated {
        return Err(Error::Usage("bn_fold: running statistics are not populated".into()));
    }
    (0..params.channels())
        .map(|c| {
            let sigma = DoubleF64::new(params.running_var[c].max(0.0)).add(DoubleF64::new(params.eps)).sqrt();
            if !(sigma.hi > 0.0) {
                return Err(Error::Usage(format!("bn_fold: channel {c} has zero variance and zero epsilon")));
            }
            let scale = DoubleF64::new(params.gamma[c]).div(sigma);
            let shift = DoubleF64::new(params.beta[c]).add(scale.mul(DoubleF64::new(params.running_mean[c])).neg());
            Ok(FoldedAffine { scale, shift })
        })
        .collect()
}

/// Folded affine `(γ′, β′)` rounded to `f64`.
pub fn bn_fold(params: &BatchNormParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = bn_fold_affine(params)?;
    Ok((f.iter().map(|a| a.scale.value()).collect(), f.iter().map(|a| a.shift.value()).collect()))
}

/// Absorbs the layer-mean BN scale into a quantizer: `s ← s + ln(mean|γ′|)`.
pub fn absorb_bn_scale(cfg: &QuantConfig, gamma_p: &[f64]) -> Result<QuantConfig> {
    let mean_abs = gamma_p.iter().map(|g| g.abs()).sum::<f64>() / gamma_p.len().max(1) as f64;
    if !(mean_abs > 0.0) || !mean_abs.is_finite() {
        return Err(Error::Usage("absorb_bn_scale: folded BN scale is zero on every channel".into()));
    }
    QuantConfig::new(cfg.bits, cfg.lower, (cfg.log_scale as f64 + mean_abs.ln()) as f32)
}
