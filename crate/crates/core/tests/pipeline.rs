use qnet::data::{gen_sequence_classes, SequenceTask, Split};
use qnet::integer::{compile_model, verify_equivalence};
use qnet::layers::{attach_quantizers, build_kws_net, replace_bn_relu, KwsConfig, Mode};
use qnet::train::{evaluate, train_stage, OptimizerConfig, TrainConfig};

fn toy() -> KwsConfig {
    KwsConfig {
        in_features: 8,
        embed: 16,
        channels: 16,
        classes: 4,
        dilations: vec![1, 2, 4],
        frames: 32,
        ..KwsConfig::default()
    }
}

#[test]
fn fp_to_integer_pipeline() {
    let data = gen_sequence_classes(&SequenceTask::new(4, 400, 32, 8), 1).unwrap();
    let net = build_kws_net(&toy(), 7).unwrap();
    let cfg = TrainConfig::new(4, OptimizerConfig::default(), 3);
    let fp = train_stage(&net, &data, &cfg, None, None, "fp").unwrap();
    let fp_acc = evaluate(&fp.net, &data, Split::Test, None).unwrap().accuracy;
    let calib = data.batch(&data.indices(Split::Train)[..64]).0;
    let q = attach_quantizers(&fp.net, &calib, 2, 4).unwrap();
    let q = train_stage(&q, &data, &cfg, Some(&fp.net), None, "q24").unwrap().net;
    let q_acc = evaluate(&q, &data, Split::Test, None).unwrap().accuracy;
    let fq = replace_bn_relu(&q).unwrap();
    assert_eq!(fq.mode, Mode::Fq);
    let fq = train_stage(&fq, &data, &cfg, Some(&q), None, "fq").unwrap().net;
    let fq_acc = evaluate(&fq, &data, Split::Test, None).unwrap().accuracy;
    eprintln!("fp {fp_acc} q {q_acc} fq {fq_acc}");
    let model = compile_model(&fq).unwrap();
    let x = data.batch(&data.indices(Split::Test)).0;
    let rep = verify_equivalence(&model, &fq, &x).unwrap();
    eprintln!("{rep:?}");
    assert!(rep.ok());
}

#[test]
fn resnet_to_integer() {
    use qnet::data::{gen_image_classes, ImageTask};
    use qnet::layers::{build_resblock_net, ResNetConfig};
    let task = ImageTask { n_classes: 3, n_samples: 150, hw: 8, channels: 3, jitter: 0.3, max_shift: 1, splits: Default::default() };
    let data = gen_image_classes(&task, 2).unwrap();
    let rc = ResNetConfig { hw: 8, classes: 3, widths: vec![4, 8], blocks_per_stage: 1, ..ResNetConfig::default() };
    let net = build_resblock_net(&rc, 1).unwrap();
    let cfg = TrainConfig::new(2, OptimizerConfig::default(), 3);
    let fp = train_stage(&net, &data, &cfg, None, None, "fp").unwrap().net;
    let calib = data.batch(&data.indices(Split::Train)[..32]).0;
    let q = attach_quantizers(&fp, &calib, 2, 4).unwrap();
    let q = train_stage(&q, &data, &cfg, None, None, "q").unwrap().net;
    let fq = replace_bn_relu(&q).unwrap();
    let fq = train_stage(&fq, &data, &cfg, None, None, "fq").unwrap().net;
    let model = compile_model(&fq).unwrap();
    let x = data.batch(&data.indices(Split::Test)).0;
    let rep = verify_equivalence(&model, &fq, &x).unwrap();
    eprintln!("{rep:?}");
    assert!(rep.ok());
}

#[test]
fn archives_round_trip_bytes() {
    use qnet::archive::*;
    let data = gen_sequence_classes(&SequenceTask::new(4, 120, 32, 8), 1).unwrap();
    let net = build_kws_net(&toy(), 7).unwrap();
    let calib = data.batch(&data.indices(Split::Train)[..16]).0;
    let q = attach_quantizers(&net, &calib, 2, 4).unwrap();
    let fq = replace_bn_relu(&q).unwrap();
    let prov = Provenance::new("FQ24", 7, Some("x = 1"));
    let a = encode_network(&fq, &prov).unwrap();
    let (back, p2) = decode_network(&a.manifest, &a.blob).unwrap();
    assert_eq!(p2, prov);
    let b = encode_network(&back, &p2).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.blob, b.blob);
    let model = compile_model(&fq).unwrap();
    let a = encode_integer(&model, &prov).unwrap();
    let (m2, _) = decode_integer(&a.manifest, &a.blob).unwrap();
    assert_eq!(m2, model);
    let b = encode_integer(&m2, &prov).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.blob, b.blob);
}
