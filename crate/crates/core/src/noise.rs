//! Gaussian noise on quantized weights, quantized activations and MAC
//! results, with standard deviations given in percent of the relevant LSB.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::layers::{Mode, Network, ParamId};
use crate::tensor::Tensor;
use crate::train::{self, StageResult, TrainConfig};

fn default_repetitions() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Weight noise, percent of the weight LSB.
    pub sigma_w: f32,
    /// Activation noise, percent of the activation LSB.
    pub sigma_a: f32,
    /// Accumulator noise, percent of the output quantizer's LSB.
    pub sigma_mac: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Draw weight noise once per repetition instead of per forward pass.
    #[serde(default)]
    pub frozen_weights: bool,
}

impl NoiseSpec {
    pub fn new(sigma_w: f32, sigma_a: f32, sigma_mac: f32) -> Self {
        NoiseSpec {
            sigma_w,
            sigma_a,
            sigma_mac,
            seed: 0,
            repetitions: default_repetitions(),
            frozen_weights: false,
        }
    }

    pub fn zero() -> Self {
        NoiseSpec::new(0.0, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_w", self.sigma_w), ("sigma_a", self.sigma_a), ("sigma_mac", self.sigma_mac)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative percentage, got {v}")));
            }
        }
        if self.repetitions == 0 {
            return Err(Error::Config("noise repetitions must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_w == 0.0 && self.sigma_a == 0.0 && self.sigma_mac == 0.0
    }

    /// Default sweep: (σ_w, σ_a, σ_MAC) = (1,1,5) … (30,30,150).
    pub fn ladder() -> Vec<NoiseSpec> {
        [(1.0, 1.0, 5.0), (5.0, 5.0, 25.0), (10.0, 10.0, 50.0), (20.0, 20.0, 100.0), (30.0, 30.0, 150.0)]
            .into_iter()
            .map(|(w, a, m)| NoiseSpec::new(w, a, m))
            .collect()
    }
}

/// Stream offsets keep evaluation, training and validation draws disjoint.
pub const TRAIN_STREAM: u64 = 1 << 40;
pub const VAL_STREAM: u64 = 1 << 41;

/// Source of per-forward noise. Every call draws fresh samples unless weight
/// noise is frozen; `draws` counts generated samples.
#[derive(Clone, Debug)]
pub struct NoiseInjector {
    spec: NoiseSpec,
    rng: ChaCha8Rng,
    draws: u64,
    frozen: BTreeMap<ParamId, Vec<f32>>,
}

impl NoiseInjector {
    /// Independent stream `stream` derived from `spec.seed`.
    pub fn new(spec: &NoiseSpec, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        NoiseInjector {
            spec: spec.clone(),
            rng,
            draws: 0,
            frozen: BTreeMap::new(),
        }
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    fn draw(&mut self, n: usize, pct: f32, lsb: f32) -> Option<Vec<f32>> {
        if pct == 0.0 {
            return None;
        }
        let std = pct / 100.0 * lsb;
        self.draws += n as u64;
        let rng = &mut self.rng;
        Some((0..n).map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            std * z
        }).collect())
    }

    pub fn weight_noise(&mut self, param: ParamId, n: usize, lsb: f32) -> Option<Vec<f32>> {
        let pct = self.spec.sigma_w;
        if !self.spec.frozen_weights {
            return self.draw(n, pct, lsb);
        }
        if let Some(d) = self.frozen.get(&param) {
            return Some(d.clone());
        }
        let d = self.draw(n, pct, lsb)?;
        self.frozen.insert(param, d.clone());
        Some(d)
    }

    pub fn activation_noise(&mut self, n: usize, lsb: f32) -> Option<Vec<f32>> {
        self.draw(n, self.spec.sigma_a, lsb)
    }

    pub fn mac_noise(&mut self, n: usize, lsb: f32) -> Option<Vec<f32>> {
        self.draw(n, self.spec.sigma_mac, lsb)
    }
}

/// `x + ε`, `ε ~ N(0, (pct/100 · lsb)²)` i.i.d.
pub fn inject(x: &Tensor, lsb: f32, pct: f32, rng: &mut impl Rng) -> Result<Tensor> {
    if !(pct >= 0.0) || !pct.is_finite() {
        return Err(Error::Config(format!("noise percentage must be non-negative, got {pct}")));
    }
    if pct == 0.0 {
        return Ok(x.clone());
    }
    if !(lsb > 0.0) {
        return Err(Error::Config(format!("LSB must be positive, got {lsb}")));
    }
    let dist = Normal::new(0.0f32, pct / 100.0 * lsb).expect("positive std");
    let data = x.data().iter().map(|&v| v + dist.sample(rng)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub spec: NoiseSpec,
    pub mean: f32,
    pub std: f32,
    pub accuracies: Vec<f32>,
}

/// Accuracy on `split` over `spec.repetitions` independent noise draws.
pub fn noisy_eval(net: &Network, data: &Dataset, split: Split, spec: &NoiseSpec) -> Result<NoiseReport> {
    spec.validate()?;
    if net.mode == Mode::Fp {
        return Err(Error::Usage("noise evaluation needs a quantized network".into()));
    }
    let accuracies = if spec.is_zero() {
        let acc = train::evaluate(net, data, split, None)?.accuracy;
        vec![acc; spec.repetitions]
    } else {
        (0..spec.repetitions)
            .map(|r| {
                let mut inj = NoiseInjector::new(spec, r as u64);
                train::evaluate(net, data, split, Some(&mut inj)).map(|e| e.accuracy)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let (mean, std) = mean_std(&accuracies);
    Ok(NoiseReport {
        spec: spec.clone(),
        mean,
        std,
        accuracies,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f32]) -> (f32, f32) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean as f32, var.sqrt() as f32)
}

/// Tab-separated table, one row per report in the given order.
pub fn format_reports(rows: &[NoiseReport]) -> String {
    let mut out = String::from("sigma_w\tsigma_a\tsigma_mac\tmean\tstd\taccuracies\n");
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{}",
            r.spec.sigma_w,
            r.spec.sigma_a,
            r.spec.sigma_mac,
            r.mean,
            r.std,
            accs.join(",")
        );
    }
    out
}

/// Fine-tunes a quantized network with noise injected on every forward pass.
/// The straight-through backward treats the noise as a constant.
pub fn noise_aware_train(net: &Network, data: &Dataset, spec: &NoiseSpec, cfg: &TrainConfig, teacher: Option<&Network>) -> Result<StageResult> {
    spec.validate()?;
    if net.mode == Mode::Fp {
        return Err(Error::Usage("noise-aware training needs a quantized network".into()));
    }
    train::train_stage(net, data, cfg, teacher, Some(spec), "noise")
}
