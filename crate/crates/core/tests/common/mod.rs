//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use qnet::data::{gen_sequence_classes, Dataset, SequenceTask};
use qnet::layers::{attach_quantizers, build_kws_net, KwsConfig, Network};
use qnet::train::{train_stage, OptimizerConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Nested-loop 1-D cross-correlation on `[C_in, L]`, accumulating over input
/// channel then tap in f32.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_ref(x: &[f32], c_in: usize, len: usize, w: &[f32], c_out: usize, taps: usize, dil: usize, pad: usize) -> Vec<f32> {
    let lo = len + 2 * pad - dil * (taps - 1);
    let mut out = vec![0.0f32; c_out * lo];
    for co in 0..c_out {
        for t in 0..lo {
            let mut acc = 0.0f32;
            for ci in 0..c_in {
                for k in 0..taps {
                    let i = (t + k * dil) as isize - pad as isize;
                    if i >= 0 && (i as usize) < len {
                        acc += w[(co * c_in + ci) * taps + k] * x[ci * len + i as usize];
                    }
                }
            }
            out[co * lo + t] = acc;
        }
    }
    out
}

/// Nested-loop 2-D cross-correlation on `[C_in, H, W]` with square kernels.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(x: &[f32], c_in: usize, h: usize, wd: usize, w: &[f32], c_out: usize, k: usize, stride: usize, pad: usize) -> Vec<f32> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; c_out * ho * wo];
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f32;
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w[((co * c_in + ci) * k + ky) * k + kx] * x[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

pub fn dense_ref(x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(m, &bias)| {
            let mut acc = 0.0f32;
            for j in 0..n {
                acc += w[m * n + j] * x[j];
            }
            acc + bias
        })
        .collect()
}

pub fn log_softmax_f64(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn cross_entropy_f64(z: &[f64], target: &[f64]) -> f64 {
    -log_softmax_f64(z).iter().zip(target).map(|(l, t)| if *t == 0.0 { 0.0 } else { t * l }).sum::<f64>()
}

/// Units in the last place between two f32 values of the same sign.
pub fn ulps(a: f32, b: f32) -> u32 {
    if a == b {
        return 0;
    }
    let (ia, ib) = (a.to_bits() as i64, b.to_bits() as i64);
    if (a < 0.0) != (b < 0.0) {
        return u32::MAX;
    }
    (ia - ib).unsigned_abs() as u32
}

/// Small sequence task and KWS-style network sized for quick tests.
pub fn small_task(seed: u64) -> Dataset {
    let mut task = SequenceTask::new(4, 320, 24, 6);
    task.jitter = 0.8;
    gen_sequence_classes(&task, seed).unwrap()
}

pub fn small_kws() -> KwsConfig {
    KwsConfig {
        in_features: 6,
        embed: 12,
        channels: 12,
        classes: 4,
        dilations: vec![1, 2, 4],
        frames: 24,
        ..KwsConfig::default()
    }
}

pub fn trained_fp(data: &Dataset, epochs: usize, seed: u64) -> Network {
    let net = build_kws_net(&small_kws(), seed).unwrap();
    let cfg = TrainConfig::new(epochs, OptimizerConfig::default(), seed);
    train_stage(&net, data, &cfg, None, None, "FP").unwrap().net
}

/// Trained FP network with quantizers attached and calibrated on `data`.
pub fn quantized(data: &Dataset, w: u32, a: u32, seed: u64) -> Network {
    let fp = trained_fp(data, 6, seed);
    let idx: Vec<usize> = (0..32).collect();
    let (x, _) = data.batch(&idx);
    attach_quantizers(&fp, &x, w, a).unwrap()
}
