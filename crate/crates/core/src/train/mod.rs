//! Optimizers, distillation and the stage/gradual-quantization loops.

mod distill;
mod gradual;
mod optim;

pub use distill::{distillation_loss, loss_node, one_hot, DistillConfig};
pub use gradual::{
    init_stage, run_gradual_quantization, stage_name, GradualOutcome, GradualSchedule, StageOutcome, StageSpec, BEST_TEACHER,
    CALIBRATION_SAMPLES,
};
pub use optim::{Optimizer, OptimizerConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_image, Dataset, Split};
use crate::error::{Error, Result};
use crate::layers::{Mode, Network};
use crate::noise::{NoiseInjector, NoiseSpec, TRAIN_STREAM, VAL_STREAM};
use crate::tensor::Tensor;

pub const EVAL_BATCH: usize = 256;

fn default_batch() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub seed: u64,
    /// Flip-and-crop augmentation padding for `[C, H, W]` samples.
    #[serde(default)]
    pub augment_pad: Option<usize>,
}

impl TrainConfig {
    pub fn new(epochs: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: default_batch(),
            optimizer,
            distill: DistillConfig::default(),
            seed,
            augment_pad: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        self.optimizer.validate()?;
        self.distill.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Top-1 accuracy as a fraction.
    pub accuracy: f32,
    pub loss: f32,
    pub samples: usize,
}

/// One line of the per-epoch metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_loss: Option<f32>,
    pub val_acc: Option<f32>,
}

#[derive(Clone, Debug)]
pub struct StageResult {
    /// Snapshot with the best validation accuracy (ties: lower loss).
    pub net: Network,
    pub log: Vec<EpochRecord>,
    /// `0` is the initial network, `e + 1` the state after epoch `e`.
    pub best_epoch: usize,
    pub best_val: Option<EvalResult>,
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode logits for the given samples, `[B, K]` row-major.
pub fn logits(net: &Network, data: &Dataset, idx: &[usize], mut noise: Option<&mut NoiseInjector>) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        let pass = net.forward(&x, false, noise.as_deref_mut())?;
        out.extend_from_slice(pass.tape.value(pass.logits));
    }
    Ok(out)
}

pub fn evaluate(net: &Network, data: &Dataset, split: Split, noise: Option<&mut NoiseInjector>) -> Result<EvalResult> {
    evaluate_indices(net, data, &data.indices(split), noise)
}

pub fn evaluate_indices(net: &Network, data: &Dataset, idx: &[usize], noise: Option<&mut NoiseInjector>) -> Result<EvalResult> {
    if idx.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let z = logits(net, data, idx, noise)?;
    let k = data.n_classes;
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for (row, &i) in z.chunks(k).zip(idx) {
        let label = data.labels[i];
        if argmax(row) == label {
            correct += 1;
        }
        loss -= crate::tensor::log_softmax_f64(row)[label];
    }
    Ok(EvalResult {
        accuracy: correct as f32 / idx.len() as f32,
        loss: (loss / idx.len() as f64) as f32,
        samples: idx.len(),
    })
}

fn better(a: &EvalResult, b: &EvalResult) -> bool {
    a.accuracy > b.accuracy || (a.accuracy == b.accuracy && a.loss < b.loss)
}

/// Trains `net` on the train split and keeps the best validation snapshot;
/// the untrained input counts as a candidate. With `noise`, every training
/// forward pass draws fresh noise and validation runs under noise too.
pub fn train_stage(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<&Network>,
    noise: Option<&NoiseSpec>,
    stage: &str,
) -> Result<StageResult> {
    cfg.validate()?;
    if let Some(spec) = noise {
        spec.validate()?;
    }
    let mut train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    if train_idx.len() < 2 {
        return Err(Error::Data("training split needs at least two samples".into()));
    }
    let mut net = net.clone();
    let validate = |net: &Network, epoch: u64| -> Result<Option<EvalResult>> {
        if val_idx.is_empty() {
            return Ok(None);
        }
        let mut inj = noise.map(|s| NoiseInjector::new(s, VAL_STREAM + epoch));
        evaluate_indices(net, data, &val_idx, inj.as_mut()).map(Some)
    };
    let mut best_val = validate(&net, 0)?;
    let mut best_net = net.clone();
    let mut best_epoch = 0;
    let mut opt = Optimizer::new(&cfg.optimizer, &net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let has_bn = net.count_layers("batch_norm") > 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at(epoch);
        train_idx.shuffle(&mut rng);
        let mut inj = noise.map(|s| NoiseInjector::new(s, TRAIN_STREAM + epoch as u64));
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for chunk in train_idx.chunks(cfg.batch_size) {
            if has_bn && chunk.len() < 2 {
                continue;
            }
            let (mut x, labels) = data.batch(chunk);
            if let Some(pad) = cfg.augment_pad {
                augment_batch(&mut x, pad, &mut rng)?;
            }
            let teacher_logits = match teacher {
                Some(t) => Some(t.forward(&x, false, None)?.logits_tensor().into_data()),
                None => None,
            };
            let mut pass = net.forward(&x, true, inj.as_mut())?;
            let loss = loss_node(&mut pass.tape, pass.logits, &labels, teacher_logits.as_deref(), &cfg.distill)?;
            let lv = pass.tape.value(loss)[0];
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    epoch,
                    loss: lv,
                });
            }
            let k = data.n_classes;
            for (row, &l) in pass.tape.value(pass.logits).chunks(k).zip(&labels) {
                correct += (argmax(row) == l) as usize;
            }
            loss_sum += lv as f64 * chunk.len() as f64;
            seen += chunk.len();
            let mut grads = pass.tape.backward(loss)?;
            let g: Vec<Option<Vec<f32>>> = pass.param_nodes.iter().map(|n| n.and_then(|n| grads.take(n))).collect();
            opt.step(&mut net.params, &g, lr);
            net.apply_bn_stats(&pass.bn_stats);
        }
        let val = validate(&net, epoch as u64 + 1)?;
        let rec = EpochRecord {
            stage: stage.to_string(),
            epoch,
            lr,
            train_loss: (loss_sum / seen.max(1) as f64) as f32,
            train_acc: correct as f32 / seen.max(1) as f32,
            val_loss: val.map(|v| v.loss),
            val_acc: val.map(|v| v.accuracy),
        };
        log::info!("{}", serde_json::to_string(&rec).unwrap_or_default());
        log.push(rec);
        match (val, best_val) {
            (Some(v), Some(b)) if !better(&v, &b) => {}
            _ => {
                best_val = val;
                best_net = net.clone();
                best_epoch = epoch + 1;
            }
        }
    }
    Ok(StageResult {
        net: best_net,
        log,
        best_epoch,
        best_val,
    })
}

fn augment_batch(x: &mut Tensor, pad: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Config(format!("image augmentation needs [B, C, H, W] samples, got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    for img in x.data_mut().chunks_mut(per) {
        augment_image(img, s[1], s[2], s[3], pad, rng);
    }
    Ok(())
}

/// Fine-tunes a BN-free network; scales stay trainable.
pub fn finetune_fq(net_fq: &Network, data: &Dataset, cfg: &TrainConfig, teacher: Option<&Network>) -> Result<StageResult> {
    if net_fq.mode != Mode::Fq {
        return Err(Error::Usage("finetune_fq expects a network produced by replace_bn_relu".into()));
    }
    train_stage(net_fq, data, cfg, teacher, None, "fq")
}

/// Metric log as line-delimited JSON.
pub fn format_log(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
        .collect()
}
