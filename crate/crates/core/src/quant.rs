//! Learned uniform quantizer `Q(x) = e^s · round(clip(x/e^s, b, 1)·n)/n`.
//!
//! Rounding is half-away-from-zero everywhere (training fake-quant, code
//! extraction and compiled thresholds all go through [`code_of`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clipping lower bound `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerBound {
    /// `b = -1`: weights, linear outputs, network inputs (hard-tanh like).
    Signed,
    /// `b = 0`: quantized ReLU.
    Unsigned,
}

impl LowerBound {
    pub fn value(self) -> f32 {
        match self {
            LowerBound::Signed => -1.0,
            LowerBound::Unsigned => 0.0,
        }
    }

    pub fn from_value(b: f32) -> Result<Self> {
        if b == -1.0 {
            Ok(LowerBound::Signed)
        } else if b == 0.0 {
            Ok(LowerBound::Unsigned)
        } else {
            Err(Error::Config(format!("lower bound must be -1 or 0, got {b}")))
        }
    }
}

/// Number of positive levels for a bitwidth: `2^(nb-1) - 1`.
pub fn levels_for_bits(bits: u32) -> Result<u32> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Config(format!("bitwidth must be in 2..=16, got {bits}")));
    }
    Ok((1u32 << (bits - 1)) - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub bits: u32,
    pub lower: LowerBound,
    /// Learnable log-scale `s`; the clip range is `[b·e^s, e^s]`.
    pub log_scale: f32,
}

impl QuantConfig {
    pub fn new(bits: u32, lower: LowerBound, log_scale: f32) -> Result<Self> {
        levels_for_bits(bits)?;
        if !log_scale.is_finite() {
            return Err(Error::Config(format!("log-scale must be finite, got {log_scale}")));
        }
        Ok(QuantConfig { bits, lower, log_scale })
    }

    pub fn levels(&self) -> u32 {
        levels_for_bits(self.bits).expect("validated bitwidth")
    }

    pub fn scale(&self) -> f32 {
        self.log_scale.exp()
    }

    /// Smallest and largest integer code: `[b·n, n]`.
    pub fn code_bounds(&self) -> (i32, i32) {
        let n = self.levels() as i32;
        (self.lower.value() as i32 * n, n)
    }

    /// Real-valued step between adjacent levels.
    pub fn lsb(&self) -> f32 {
        self.scale() / self.levels() as f32
    }
}

/// Integer code of `x` under scale `e^s` (passed as `scale`).
#[inline]
pub fn code_of(x: f32, scale: f32, lower: f32, levels: u32) -> i32 {
    let u = (x / scale).clamp(lower, 1.0);
    (u * levels as f32).round() as i32
}

/// Real value of a code; the single definition every path shares.
#[inline]
pub fn dequantize(code: i32, scale: f32, levels: u32) -> f32 {
    scale * (code as f32 / levels as f32)
}

/// `round(clip(x, b, 1)·n)/n`.
pub fn quantize_core(x: &Tensor, lower: LowerBound, levels: u32) -> Tensor {
    let b = lower.value();
    let n = levels as f32;
    let data = x
        .data()
        .iter()
        .map(|&v| (v.clamp(b, 1.0) * n).round() as i32 as f32 / n)
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `e^s · quantize_core(x / e^s)`.
pub fn learned_quantize(x: &Tensor, cfg: &QuantConfig) -> Tensor {
    let (scale, lower, n) = (cfg.scale(), cfg.lower.value(), cfg.levels());
    let data = x
        .data()
        .iter()
        .map(|&v| dequantize(code_of(v, scale, lower, n), scale, n))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Straight-through backward of the clip surrogate `g(x,s) = e^s·clip(x/e^s, b, 1)`.
/// Returns per-element `grad_x` and the summed `grad_s`.
///
/// At exactly `x = b·e^s` the pass-through subgradient is taken, so a unit
/// whose input is identically zero (all weight codes rounded away) still
/// receives gradient through a `b = 0` quantizer.
pub fn ste_backward(upstream: &[f32], x: &[f32], scale: f32, lower: f32) -> (Vec<f32>, f32) {
    let mut gs = 0.0f64;
    let gx = upstream
        .iter()
        .zip(x)
        .map(|(&up, &v)| {
            let u = v / scale;
            if u >= lower && u < 1.0 {
                up
            } else {
                if u > 1.0 {
                    gs += (up * scale) as f64;
                } else if u < lower {
                    gs += (up * lower * scale) as f64;
                }
                0.0
            }
        })
        .collect();
    (gx, gs as f32)
}

pub fn learned_quantize_backward(upstream: &Tensor, x: &Tensor, cfg: &QuantConfig) -> Result<(Tensor, f32)> {
    if upstream.shape() != x.shape() {
        return Err(Error::shape(
            "learned_quantize_backward",
            "upstream vs x",
            format!("{:?} vs {:?}", upstream.shape(), x.shape()),
        ));
    }
    let (gx, gs) = ste_backward(upstream.data(), x.data(), cfg.scale(), cfg.lower.value());
    Ok((Tensor::new(x.shape().to_vec(), gx)?, gs))
}

/// Signed integer codes with shape metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegerTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i32>,
}

/// `round(clip(x/e^s, b, 1)·n)`; satisfies
/// `learned_quantize(x) == dequantize(codes)` bit-exactly.
pub fn to_integer_codes(x: &Tensor, cfg: &QuantConfig) -> IntegerTensor {
    let (scale, lower, n) = (cfg.scale(), cfg.lower.value(), cfg.levels());
    IntegerTensor {
        shape: x.shape().to_vec(),
        codes: x.data().iter().map(|&v| code_of(v, scale, lower, n)).collect(),
    }
}

/// Real weight of one unit of the integer accumulator:
/// `k = (e^{s_w}/n_w)·(e^{s_a}/n_a)`, evaluated in f64.
pub fn mac_scale(w_scale: f32, w_levels: u32, a_scale: f32, a_levels: u32) -> f64 {
    (w_scale as f64 / w_levels as f64) * (a_scale as f64 / a_levels as f64)
}

/// Real-valued pre-activation for accumulator value `acc`. Shared by the
/// fake-quant float path and the threshold compiler.
#[inline]
pub fn mac_to_real(k: f64, acc: i64) -> f32 {
    (k * acc as f64) as f32
}

/// Full-precision master copy of a quantized weight tensor. The optimizer
/// updates this copy only; quantized weights are always recomputed from it.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowWeights {
    master: Tensor,
}

impl ShadowWeights {
    pub fn new(master: Tensor) -> Self {
        ShadowWeights { master }
    }

    pub fn master(&self) -> &Tensor {
        &self.master
    }

    /// SGD-style update of the master copy from the gradient received by the
    /// quantized weights, routed through the STE.
    pub fn apply_quantized_grad(&mut self, quantized_grad: &Tensor, cfg: &QuantConfig, lr: f32) -> Result<f32> {
        let (gx, gs) = learned_quantize_backward(quantized_grad, &self.master, cfg)?;
        for (w, g) in self.master.data_mut().iter_mut().zip(gx.data()) {
            *w -= lr * g;
        }
        Ok(gs)
    }
}

/// Quantized weights derived from the shadow copy.
pub fn sync_shadow(shadow: Option<&ShadowWeights>, cfg: &QuantConfig) -> Result<Tensor> {
    let shadow = shadow.ok_or_else(|| Error::Usage("no shadow weights attached to this layer".into()))?;
    Ok(learned_quantize(shadow.master(), cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn levels_follow_bitwidth() {
        assert_eq!(levels_for_bits(2).unwrap(), 1);
        assert_eq!(levels_for_bits(4).unwrap(), 7);
        assert_eq!(levels_for_bits(5).unwrap(), 15);
        assert!(levels_for_bits(1).is_err());
    }

    #[test]
    fn ternary_core_values() {
        let y = quantize_core(&t(&[0.3, 0.6, -2.0, -0.6, 5.0]), LowerBound::Signed, 1);
        assert_eq!(y.data(), &[0.0, 1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn half_way_rounds_away_from_zero() {
        let y = quantize_core(&t(&[0.5]), LowerBound::Unsigned, 7);
        assert_eq!(y.data(), &[4.0 / 7.0]);
        let y = quantize_core(&t(&[-0.5]), LowerBound::Signed, 7);
        assert_eq!(y.data(), &[-4.0 / 7.0]);
    }

    #[test]
    fn zero_log_scale_is_core() {
        let x = t(&[-1.3, -0.2, 0.07, 0.49, 0.93, 1.7]);
        let cfg = QuantConfig::new(4, LowerBound::Signed, 0.0).unwrap();
        assert_eq!(learned_quantize(&x, &cfg), quantize_core(&x, LowerBound::Signed, 7));
    }

    #[test]
    fn log_two_scale() {
        let cfg = QuantConfig::new(2, LowerBound::Signed, std::f32::consts::LN_2).unwrap();
        let y = learned_quantize(&t(&[1.2]), &cfg);
        assert_eq!(y.data(), &[cfg.scale()]);
        assert!((y.data()[0] - 2.0).abs() <= f32::EPSILON * 2.0);
    }

    #[test]
    fn codes_examples() {
        let cfg = QuantConfig::new(2, LowerBound::Signed, 0.0).unwrap();
        assert_eq!(to_integer_codes(&t(&[-3.0, 0.2, 0.7]), &cfg).codes, vec![-1, 0, 1]);
        let cfg = QuantConfig::new(5, LowerBound::Signed, 0.0).unwrap();
        assert_eq!(to_integer_codes(&t(&[1.0]), &cfg).codes, vec![15]);
    }

    #[test]
    fn ste_cases() {
        let cfg = QuantConfig::new(3, LowerBound::Signed, 0.5).unwrap();
        let s = cfg.scale();
        let x = t(&[0.2 * s, 10.0 * s, -4.0 * s]);
        let up = t(&[2.0, 3.0, 5.0]);
        let (gx, gs) = learned_quantize_backward(&up, &x, &cfg).unwrap();
        assert_eq!(gx.data(), &[2.0, 0.0, 0.0]);
        let expect = 3.0 * s - 5.0 * s;
        assert!((gs - expect).abs() < 1e-5);
    }

    #[test]
    fn shadow_sync() {
        let cfg = QuantConfig::new(3, LowerBound::Signed, 0.0).unwrap();
        assert!(sync_shadow(None, &cfg).is_err());
        let mut sh = ShadowWeights::new(t(&[0.1, -0.5, 0.8]));
        let q0 = sync_shadow(Some(&sh), &cfg).unwrap();
        sh.apply_quantized_grad(&t(&[0.0, 0.0, 0.0]), &cfg, 0.1).unwrap();
        assert_eq!(sync_shadow(Some(&sh), &cfg).unwrap(), q0);
        // below half an LSB and not crossing a boundary
        let mut sh2 = ShadowWeights::new(t(&[0.1 + 0.01, -0.5, 0.8]));
        assert_eq!(sync_shadow(Some(&sh2), &cfg).unwrap(), q0);
        sh2.apply_quantized_grad(&t(&[1.0, -2.0, 0.5]), &cfg, 0.3).unwrap();
        assert_eq!(sync_shadow(Some(&sh2), &cfg).unwrap(), learned_quantize(sh2.master(), &cfg));
    }
}
