use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate, train_stage, EpochRecord, EvalResult, TrainConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::layers::{attach_quantizers, replace_bn_relu, set_bitwidths, set_input_bits, Mode, Network};
use crate::quant::levels_for_bits;

/// Teacher reference that resolves to the most accurate (validation) network
/// finished so far.
pub const BEST_TEACHER: &str = "best";

/// Conventional stage name: `Q{w}{a}`, prefixed with `F` for BN-free stages.
pub fn stage_name(weight_bits: u32, act_bits: u32, fq: bool) -> String {
    format!("{}Q{weight_bits}{act_bits}", if fq { "F" } else { "" })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    /// `None` (together with `act_bits`) trains a full-precision stage.
    #[serde(default)]
    pub weight_bits: Option<u32>,
    #[serde(default)]
    pub act_bits: Option<u32>,
    /// Stage (or baseline) whose parameters initialize this one.
    pub init: String,
    /// Stage name, the baseline, or `"best"`; `None` trains on hard labels.
    #[serde(default)]
    pub teacher: Option<String>,
    pub epochs: usize,
    /// Overrides the base learning rate.
    #[serde(default)]
    pub lr: Option<f32>,
    /// Replace BN+ReLU by quantizers before training this stage.
    #[serde(default)]
    pub fq: bool,
    /// Bitwidth for quantizers with no conv upstream (the network input);
    /// `None` lets them follow `act_bits`.
    #[serde(default)]
    pub input_bits: Option<u32>,
}

impl StageSpec {
    pub fn quantized(weight_bits: u32, act_bits: u32, init: &str, teacher: Option<&str>, epochs: usize) -> Self {
        StageSpec {
            name: stage_name(weight_bits, act_bits, false),
            weight_bits: Some(weight_bits),
            act_bits: Some(act_bits),
            init: init.into(),
            teacher: teacher.map(Into::into),
            epochs,
            lr: None,
            fq: false,
            input_bits: None,
        }
    }

    pub fn bits(&self) -> Option<(u32, u32)> {
        self.weight_bits.zip(self.act_bits)
    }
}

fn default_baseline() -> String {
    "FP".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradualSchedule {
    #[serde(default = "default_baseline")]
    pub baseline: String,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    /// Validation accuracy (fraction) every stage must reach.
    #[serde(default)]
    pub min_accuracy: Option<f32>,
}

impl Default for GradualSchedule {
    fn default() -> Self {
        GradualSchedule {
            baseline: default_baseline(),
            stages: vec![],
            min_accuracy: None,
        }
    }
}

impl GradualSchedule {
    /// FP → Q66 → Q45 → Q35 → Q24 → FQ24 with the teacher wiring of the
    /// keyword-spotting recipe.
    pub fn keyword_spotting(epochs: usize, fq_epochs: usize) -> Self {
        let mut stages = vec![
            StageSpec::quantized(6, 6, "FP", Some("FP"), epochs),
            StageSpec::quantized(4, 5, "Q66", Some("Q66"), epochs),
            StageSpec::quantized(3, 5, "Q45", Some("Q45"), epochs),
            StageSpec::quantized(2, 4, "Q35", Some("Q45"), epochs),
        ];
        let mut fq = StageSpec::quantized(2, 4, "Q24", Some("Q45"), fq_epochs);
        fq.name = stage_name(2, 4, true);
        fq.fq = true;
        stages.push(fq);
        GradualSchedule {
            baseline: default_baseline(),
            stages,
            min_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let mut known = vec![self.baseline.as_str()];
        let mut last: Option<(u32, u32)> = None;
        let mut seen_fq = false;
        for s in &self.stages {
            if known.contains(&s.name.as_str()) || s.name == BEST_TEACHER {
                return cfg(format!("duplicate or reserved stage name '{}'", s.name));
            }
            if !known.contains(&s.init.as_str()) {
                return cfg(format!("stage '{}' initializes from unknown or later stage '{}'", s.name, s.init));
            }
            if let Some(t) = &s.teacher {
                if t != BEST_TEACHER && !known.contains(&t.as_str()) {
                    return cfg(format!("stage '{}' uses unknown or later teacher '{t}'", s.name));
                }
            }
            if s.input_bits.is_some() && s.bits().is_none() {
                return cfg(format!("stage '{}' sets input_bits but is not quantized", s.name));
            }
            match (s.weight_bits, s.act_bits) {
                (Some(w), Some(a)) => {
                    levels_for_bits(w)?;
                    levels_for_bits(a)?;
                    if let Some(i) = s.input_bits {
                        levels_for_bits(i)?;
                    }
                    if let Some((lw, la)) = last {
                        if w > lw || a > la {
                            return cfg(format!(
                                "stage '{}' raises bitwidths from {lw}/{la} to {w}/{a}; schedules must not increase",
                                s.name
                            ));
                        }
                    }
                    last = Some((w, a));
                }
                (None, None) if !s.fq => {
                    if seen_fq {
                        return cfg(format!("full-precision stage '{}' after a BN-free stage", s.name));
                    }
                }
                _ => return cfg(format!("stage '{}' must set both bitwidths or neither", s.name)),
            }
            seen_fq |= s.fq;
            known.push(&s.name);
        }
        if let Some(f) = self.min_accuracy {
            if !(0.0..=1.0).contains(&f) {
                return cfg(format!("min_accuracy must be a fraction, got {f}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub name: String,
    pub net: Network,
    pub val: Option<EvalResult>,
    pub test: Option<EvalResult>,
    pub log: Vec<EpochRecord>,
    /// Taken from `completed` instead of trained.
    pub resumed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradualOutcome {
    pub stages: Vec<StageOutcome>,
}

impl GradualOutcome {
    pub fn get(&self, name: &str) -> Option<&StageOutcome> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn last(&self) -> Option<&StageOutcome> {
        self.stages.last()
    }
}

fn eval_split(net: &Network, data: &Dataset, split: Split) -> Result<Option<EvalResult>> {
    if data.indices(split).is_empty() {
        return Ok(None);
    }
    evaluate(net, data, split, None).map(Some)
}

/// Number of training samples used to calibrate fresh quantizer scales.
pub const CALIBRATION_SAMPLES: usize = 256;

/// Builds the stage's starting network from its initializer.
pub fn init_stage(spec: &StageSpec, init: &Network, data: &Dataset) -> Result<Network> {
    let mut net = match spec.bits() {
        Some((w, a)) => match init.mode {
            Mode::Fp => {
                let idx: Vec<usize> = data.indices(Split::Train).into_iter().take(CALIBRATION_SAMPLES).collect();
                if idx.is_empty() {
                    return Err(Error::Data("no training samples for quantizer calibration".into()));
                }
                attach_quantizers(init, &data.batch(&idx).0, w, a)?
            }
            _ => set_bitwidths(init, w, a)?,
        },
        None => {
            if init.mode == Mode::Fq {
                return Err(Error::Config(format!("full-precision stage '{}' cannot start from a BN-free network", spec.name)));
            }
            let mut n = init.clone();
            n.mode = Mode::Fp;
            n
        }
    };
    if let Some(bits) = spec.input_bits {
        net = set_input_bits(&net, bits)?;
    }
    if spec.fq {
        net = replace_bn_relu(&net)?;
    }
    Ok(net)
}

/// Runs every stage in order. Stages listed in `completed` are reused
/// without training. `on_stage` sees each newly trained stage before the
/// next one starts; a stage below the accuracy floor stops the run.
pub fn run_gradual_quantization(
    schedule: &GradualSchedule,
    baseline: &Network,
    data: &Dataset,
    base: &TrainConfig,
    completed: &BTreeMap<String, Network>,
    on_stage: &mut dyn FnMut(&StageOutcome) -> Result<()>,
) -> Result<GradualOutcome> {
    schedule.validate()?;
    let mut nets: BTreeMap<String, Network> = BTreeMap::new();
    nets.insert(schedule.baseline.clone(), baseline.clone());
    let base_val = eval_split(baseline, data, Split::Val)?;
    let mut best: (String, f32) = (schedule.baseline.clone(), base_val.map_or(0.0, |v| v.accuracy));
    let mut outcome = GradualOutcome::default();

    for spec in &schedule.stages {
        let (net, log, resumed) = if let Some(done) = completed.get(&spec.name) {
            (done.clone(), Vec::new(), true)
        } else {
            let start = init_stage(spec, &nets[&spec.init], data)?;
            let teacher = match spec.teacher.as_deref() {
                None => None,
                Some(BEST_TEACHER) => Some(&nets[&best.0]),
                Some(t) => Some(&nets[t]),
            };
            let mut cfg = base.clone();
            cfg.epochs = spec.epochs;
            if let Some(lr) = spec.lr {
                cfg.optimizer = cfg.optimizer.with_lr(lr);
            }
            let r = train_stage(&start, data, &cfg, teacher, None, &spec.name)?;
            (r.net, r.log, false)
        };
        let val = eval_split(&net, data, Split::Val)?;
        let test = eval_split(&net, data, Split::Test)?;
        if let (Some(floor), Some(v)) = (schedule.min_accuracy, val) {
            if v.accuracy < floor {
                return Err(Error::BelowFloor {
                    stage: spec.name.clone(),
                    accuracy: v.accuracy,
                    floor,
                });
            }
        }
        if let Some(v) = val {
            if v.accuracy > best.1 {
                best = (spec.name.clone(), v.accuracy);
            }
        }
        let out = StageOutcome {
            name: spec.name.clone(),
            net: net.clone(),
            val,
            test,
            log,
            resumed,
        };
        if !resumed {
            on_stage(&out)?;
        }
        nets.insert(spec.name.clone(), net);
        outcome.stages.push(out);
    }
    Ok(outcome)
}
