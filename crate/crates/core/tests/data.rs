mod common;

use std::time::Instant;

use qnet::data::{gen_sequence_classes, read_csv_features, save_csv_features, load_csv_features, CsvSchema, Dataset, SequenceTask, Split};
use qnet::layers::{build_kws_net, KwsConfig};
use qnet::train::{evaluate, train_stage, OptimizerConfig, TrainConfig};

#[test]
fn separated_templates_are_learned_perfectly() {
    let mut task = SequenceTask::new(2, 200, 16, 4);
    task.jitter = 0.0;
    task.max_shift = 0;
    task.separation = 4.0;
    let data = gen_sequence_classes(&task, 1).unwrap();
    let cfg = KwsConfig { in_features: 4, embed: 8, channels: 8, classes: 2, dilations: vec![1], frames: 16, ..KwsConfig::default() };
    let net = build_kws_net(&cfg, 1).unwrap();
    let net = train_stage(&net, &data, &TrainConfig::new(10, OptimizerConfig::default(), 1), None, None, "fp").unwrap().net;
    assert_eq!(evaluate(&net, &data, Split::Test, None).unwrap().accuracy, 1.0);
}

#[test]
fn csv_round_trip_is_exact() {
    let data = gen_sequence_classes(&SequenceTask::new(3, 90, 10, 2), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    save_csv_features(&data, &path).unwrap();
    let schema = CsvSchema { sample_shape: data.sample_shape.clone(), n_classes: 3 };
    let back = load_csv_features(&path, &schema).unwrap();
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.splits, data.splits);
    assert_eq!(back.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn header_only_csv_is_an_error() {
    let schema = CsvSchema { sample_shape: vec![2], n_classes: 2 };
    let err = read_csv_features("label,split,f0,f1\n".as_bytes(), &schema, "h.csv".as_ref()).unwrap_err();
    assert!(err.to_string().to_lowercase().contains("empty") || err.to_string().contains("no samples"), "{err}");
}

#[test]
fn thousand_rows_parse_quickly() {
    let d = 39 * 8;
    let mut text = String::from("label,split");
    for i in 0..d {
        text.push_str(&format!(",f{i}"));
    }
    text.push('\n');
    for r in 0..1000 {
        text.push_str(&format!("{},{}", r % 4, ["train", "val", "test"][r % 3]));
        for i in 0..d {
            text.push_str(&format!(",{}", ((r * 31 + i * 7) % 97) as f32 * 0.01 - 0.5));
        }
        text.push('\n');
    }
    let schema = CsvSchema { sample_shape: vec![39, 8], n_classes: 4 };
    let start = Instant::now();
    let data: Dataset = read_csv_features(text.as_bytes(), &schema, "big.csv".as_ref()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert_eq!(data.len(), 1000);
}

#[test]
fn class_averages_recover_templates() {
    let mut task = SequenceTask::new(3, 3000, 12, 2);
    task.max_shift = 0;
    let a = gen_sequence_classes(&task, 11).unwrap();
    let b = gen_sequence_classes(&task, 11).unwrap();
    assert_eq!(a.features, b.features);
    // per class, sample means of one element differ by at most 3σ/√n from
    // the noiseless template recovered from a jitter-free twin
    let mut clean = task.clone();
    clean.jitter = 0.0;
    let t = gen_sequence_classes(&clean, 11).unwrap();
    let means = a.class_means();
    let templates = t.class_means();
    for c in 0..3 {
        let n = a.labels.iter().filter(|&&l| l == c).count() as f64;
        for (m, tv) in means[c].iter().zip(&templates[c]) {
            assert!((m - tv).abs() <= 3.0 * task.jitter as f64 / n.sqrt() + 1e-6, "class {c}: {m} vs {tv}");
        }
    }
}
