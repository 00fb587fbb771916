mod common;

use common::*;
use proptest::prelude::*;
use qnet::data::{gen_sequence_classes, SequenceTask, Split};
use qnet::layers::{build_kws_net, replace_bn_relu, Layer, KwsConfig};
use qnet::train::{distillation_loss, evaluate, finetune_fq, train_stage, DistillConfig, OptimizerConfig, TrainConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn distillation_matches_f64_oracle(k in 2usize..10, seed in 0u64..10_000, alpha in 0.0f32..=1.0, label_pick in 0usize..100) {
        let mut r = rng(seed);
        let s: Vec<f32> = randn(&mut r, k).iter().map(|v| v * 2.0).collect();
        let t: Vec<f32> = randn(&mut r, k).iter().map(|v| v * 2.0).collect();
        let label = label_pick % k;
        let cfg = DistillConfig { temperature: 4.0, alpha };
        let got = distillation_loss(&s, &t, label, &cfg).unwrap() as f64;
        let temp = 4.0f64;
        let sd: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        let td: Vec<f64> = t.iter().map(|&v| v as f64 / temp).collect();
        let soft: Vec<f64> = log_softmax_f64(&td).iter().map(|l| l.exp()).collect();
        let scaled: Vec<f64> = sd.iter().map(|v| v / temp).collect();
        let mut hard = vec![0.0; k];
        hard[label] = 1.0;
        let a = alpha as f64;
        let want = a * temp * temp * cross_entropy_f64(&scaled, &soft) + (1.0 - a) * cross_entropy_f64(&sd, &hard);
        prop_assert!(((got - want) / want).abs() <= 1e-5, "{got} vs {want}");
    }
}

#[test]
fn separable_data_is_fit() {
    let mut task = SequenceTask::new(3, 300, 16, 4);
    task.jitter = 0.2;
    task.max_shift = 0;
    let data = gen_sequence_classes(&task, 2).unwrap();
    let cfg = KwsConfig { in_features: 4, embed: 8, channels: 8, classes: 3, dilations: vec![1, 2], frames: 16, ..KwsConfig::default() };
    let net = build_kws_net(&cfg, 2).unwrap();
    let run = train_stage(&net, &data, &TrainConfig::new(50, OptimizerConfig::default(), 2), None, None, "fp").unwrap();
    assert!(evaluate(&run.net, &data, Split::Train, None).unwrap().accuracy >= 0.99);
    assert_eq!(run.log.len(), 50);
    for (e, rec) in run.log.iter().enumerate() {
        assert_eq!(rec.epoch, e);
        assert!(rec.train_loss.is_finite() && rec.val_loss.unwrap().is_finite() && rec.val_acc.is_some());
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let data = small_task(3);
    let net = build_kws_net(&small_kws(), 3).unwrap();
    let cfg = TrainConfig::new(2, OptimizerConfig::default().with_lr(0.0), 3);
    let out = train_stage(&net, &data, &cfg, None, None, "fp").unwrap().net;
    for (a, b) in net.params.iter().zip(out.params.iter()) {
        if a.name.contains("running") {
            continue;
        }
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
}

#[test]
fn fq_finetune_moves_scales_and_zero_epochs_is_identity() {
    let data = small_task(6);
    let fq = replace_bn_relu(&quantized(&data, 2, 4, 6)).unwrap();
    let same = finetune_fq(&fq, &data, &TrainConfig::new(0, OptimizerConfig::default(), 6), None).unwrap().net;
    assert_eq!(same, fq);
    let cfg = TrainConfig::new(3, OptimizerConfig::default().with_lr(0.01), 6);
    let tuned = finetune_fq(&fq, &data, &cfg, None).unwrap();
    assert!(tuned.best_epoch > 0, "training improved on the initial snapshot");
    let scales = |n: &qnet::layers::Network| -> Vec<f32> {
        n.nodes.iter().filter_map(|node| match node.layer {
            Layer::Quant { log_scale, .. } => Some(n.params.scalar(log_scale)),
            _ => None,
        }).collect()
    };
    assert_ne!(scales(&fq), scales(&tuned.net));
}

#[test]
fn training_is_deterministic() {
    let data = small_task(7);
    let a = trained_fp(&data, 2, 7);
    let b = trained_fp(&data, 2, 7);
    assert_eq!(a, b);
}
