use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

fn default_temperature() -> f32 {
    4.0
}
fn default_alpha() -> f32 {
    0.9
}

/// Soft-label training: `α·T²·CE(softmax(t/T), softmax(s/T)) + (1−α)·CE(y, softmax(s))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: default_temperature(),
            alpha: default_alpha(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Vec<f32> {
    let mut t = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        t[i * k + l] = 1.0;
    }
    t
}

/// Batch-mean loss node on `logits [B, K]`. Without a teacher, or with
/// `α = 0`, this is exactly the hard-label cross-entropy node.
pub fn loss_node(tape: &mut Tape, logits: NodeId, labels: &[usize], teacher: Option<&[f32]>, cfg: &DistillConfig) -> Result<NodeId> {
    let k = tape.shape(logits)[1];
    let hard = || one_hot(labels, k);
    let teacher = match teacher {
        Some(t) if cfg.alpha > 0.0 => t,
        _ => return tape.softmax_cross_entropy(logits, &hard()),
    };
    cfg.validate()?;
    if teacher.len() != tape.value(logits).len() {
        return Err(Error::shape("distillation_loss", "teacher logits", format!("{} vs {}", teacher.len(), tape.value(logits).len())));
    }
    let inv_t = 1.0 / cfg.temperature;
    let soft_targets: Vec<f32> = teacher
        .chunks(k)
        .flat_map(|row| soft_targets_f64(row, cfg.temperature as f64))
        .collect();
    let scaled = tape.scale(logits, inv_t);
    let soft = tape.softmax_cross_entropy(scaled, &soft_targets)?;
    let soft = tape.scale(soft, cfg.alpha * cfg.temperature * cfg.temperature);
    if cfg.alpha == 1.0 {
        return Ok(soft);
    }
    let ce = tape.softmax_cross_entropy(logits, &hard())?;
    let ce = tape.scale(ce, 1.0 - cfg.alpha);
    tape.add(soft, ce)
}

/// Tempered softmax evaluated in f64 so each row sums to one within f32
/// rounding of the individual entries.
fn soft_targets_f64(row: &[f32], t: f64) -> Vec<f32> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = row.iter().map(|&v| ((v as f64 - max) / t).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|v| (v / sum) as f32).collect()
}

/// Loss for a single example.
pub fn distillation_loss(student: &[f32], teacher: &[f32], label: usize, cfg: &DistillConfig) -> Result<f32> {
    cfg.validate()?;
    if student.len() != teacher.len() {
        return Err(Error::shape("distillation_loss", "logits", format!("{} vs {}", student.len(), teacher.len())));
    }
    if label >= student.len() {
        return Err(Error::Data(format!("label {label} outside {} classes", student.len())));
    }
    let mut tape = Tape::no_grad();
    let s = tape.leaf(&Tensor::new(vec![1, student.len()], student.to_vec())?);
    let l = loss_node(&mut tape, s, &[label], Some(teacher), cfg)?;
    Ok(tape.value(l)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_cross_entropy;

    #[test]
    fn alpha_zero_is_cross_entropy_bit_exact() {
        let s = [0.3f32, -1.2, 2.2, 0.05];
        let t = [1.0f32, 0.0, -0.5, 0.7];
        let cfg = DistillConfig {
            temperature: 4.0,
            alpha: 0.0,
        };
        let d = distillation_loss(&s, &t, 2, &cfg).unwrap();
        let ce = softmax_cross_entropy(&Tensor::new(vec![4], s.to_vec()).unwrap(), &[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(d.to_bits(), ce.to_bits());
    }

    #[test]
    fn matched_logits_give_teacher_entropy() {
        let z = [0.5f32, -0.3, 1.7];
        let cfg = DistillConfig {
            temperature: 2.0,
            alpha: 1.0,
        };
        let d = distillation_loss(&z, &z, 0, &cfg).unwrap();
        let p: Vec<f64> = {
            let e: Vec<f64> = z.iter().map(|v| (*v as f64 / 2.0).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let h: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>() * 4.0;
        assert!((d as f64 - h).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_temperature() {
        let cfg = DistillConfig {
            temperature: 0.0,
            alpha: 0.5,
        };
        assert!(distillation_loss(&[0.0, 1.0], &[1.0, 0.0], 0, &cfg).is_err());
    }
}
