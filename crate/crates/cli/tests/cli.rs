use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "toy"
seed = 5

[data]
kind = "sequence"
n_classes = 4
n_samples = 240
length = 24
channels = 6
jitter = 0.6
max_shift = 3
separation = 1.0

[network]
kind = "kws"
in_features = 6
embed = 12
channels = 12
classes = 4
dilations = [1, 2, 4]
frames = 24

[train]
epochs = 2
batch_size = 16

[[schedule.stages]]
name = "Q45"
weight_bits = 4
act_bits = 5
init = "FP"
teacher = "FP"
epochs = 1

[[schedule.stages]]
name = "Q24"
weight_bits = 2
act_bits = 4
init = "Q45"
teacher = "Q45"
epochs = 1

[noise]
ladder = [[1.0, 1.0, 5.0], [30.0, 30.0, 150.0]]
repetitions = 2
train_point = [20.0, 20.0, 100.0]
"#;

fn qnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qnet")).current_dir(dir).args(args).output().expect("spawn qnet")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = qnet(dir, args);
    assert!(o.status.success(), "qnet {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn pipeline(dir: &Path) {
    fs::write(dir.join("run.toml"), CONFIG).unwrap();
    ok(dir, &["train", "--config", "run.toml", "--out", "out"]);
    ok(dir, &["quantize", "--config", "run.toml", "--out", "out"]);
    ok(dir, &["transform-fq", "out/Q24", "--out", "out/FQ24-init"]);
    ok(dir, &["train", "--config", "run.toml", "--out", "out", "--init", "out/FQ24-init", "--teacher", "out/Q45", "--stage", "FQ24"]);
    ok(dir, &["compile-int", "out/FQ24", "--config", "run.toml", "--out", "out/int"]);
    ok(dir, &["noise-eval", "out/FQ24", "--config", "run.toml", "--out", "out/noise.tsv"]);
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let fa = files(&a.path().join("out"));
    let fb = files(&b.path().join("out"));
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    for want in ["FP/manifest.json", "Q45/tensors.bin", "Q24/metrics.jsonl", "FQ24/manifest.json", "int/manifest.json", "int/equivalence.json", "noise.tsv"] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.0, y.0);
        assert!(x.1 == y.1, "{} differs between identical runs", x.0);
    }

    let d = a.path();
    let noise = fs::read_to_string(d.join("out/noise.tsv")).unwrap();
    assert_eq!(noise.lines().count(), 4, "header, zero row, two ladder rows");
    assert!(noise.lines().nth(1).unwrap().starts_with("0\t0\t0\t"));

    // integer and float archives predict the same classes
    let int_pred = ok(d, &["infer", "out/int", "--config", "run.toml"]);
    let fq_pred = ok(d, &["infer", "out/FQ24", "--config", "run.toml"]);
    assert_eq!(int_pred, fq_pred);
    assert!(int_pred.lines().last().unwrap().starts_with("accuracy\t"));

    ok(d, &["verify", "out/int", "--model", "out/FQ24", "--config", "run.toml"]);
    ok(d, &["verify", "out/int"]);
    ok(d, &["verify", "out/FQ24"]);

    // transform on an fq archive is a no-op
    ok(d, &["transform-fq", "out/FQ24-init", "--out", "out/again"]);
    assert_eq!(fs::read(d.join("out/again/tensors.bin")).unwrap(), fs::read(d.join("out/FQ24-init/tensors.bin")).unwrap());
}

#[test]
fn resume_and_stop_after_stage() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    ok(d, &["train", "--config", "run.toml", "--out", "out"]);
    ok(d, &["quantize", "--config", "run.toml", "--out", "out", "--stage", "Q45"]);
    assert!(d.join("out/Q45/manifest.json").exists());
    assert!(!d.join("out/Q24").exists());
    let before = fs::read(d.join("out/Q45/tensors.bin")).unwrap();
    let s = ok(d, &["quantize", "--config", "run.toml", "--out", "out", "--resume"]);
    assert!(s.contains("Q45\t") && s.contains("(resumed)"));
    assert_eq!(fs::read(d.join("out/Q45/tensors.bin")).unwrap(), before);
    assert!(d.join("out/Q24/manifest.json").exists());
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fs::write(d.join("typo.toml"), CONFIG.replace("epochs = 2", "epochs = 2\nepoch = 2")).unwrap();
    assert_eq!(code(&qnet(d, &["train", "--config", "typo.toml", "--out", "out"])), 2);
    assert!(!d.join("out").exists());

    let csv = CONFIG.replace(
        "kind = \"sequence\"\nn_classes = 4\nn_samples = 240\nlength = 24\nchannels = 6\njitter = 0.6\nmax_shift = 3\nseparation = 1.0",
        "kind = \"csv\"\npath = \"missing.csv\"\nsample_shape = [6, 24]\nn_classes = 4",
    );
    fs::write(d.join("csv.toml"), &csv).unwrap();
    let o = qnet(d, &["train", "--config", "csv.toml", "--out", "out"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!d.join("out").exists(), "no partial outputs");

    fs::write(d.join("nan.toml"), CONFIG.replace("separation = 1.0", "separation = 1e38").replace("jitter = 0.6", "jitter = 1e38")).unwrap();
    assert_eq!(code(&qnet(d, &["train", "--config", "nan.toml", "--out", "out"])), 4);

    // quantize without a baseline is a usage error
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    assert_eq!(code(&qnet(d, &["quantize", "--config", "run.toml", "--out", "nothing"])), 2);
}

#[test]
fn gen_data_round_trips_through_csv() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    ok(d, &["gen-data", "--config", "run.toml", "--out", "data.csv"]);
    let csv = CONFIG.replace(
        "kind = \"sequence\"\nn_classes = 4\nn_samples = 240\nlength = 24\nchannels = 6\njitter = 0.6\nmax_shift = 3\nseparation = 1.0",
        "kind = \"csv\"\npath = \"data.csv\"\nsample_shape = [6, 24]\nn_classes = 4",
    );
    fs::write(d.join("csv.toml"), csv).unwrap();
    ok(d, &["gen-data", "--config", "run.toml", "--out", "again.csv"]);
    assert_eq!(fs::read(d.join("data.csv")).unwrap(), fs::read(d.join("again.csv")).unwrap());
    ok(d, &["train", "--config", "csv.toml", "--out", "a"]);
    ok(d, &["train", "--config", "run.toml", "--out", "b"]);
    assert_eq!(fs::read(d.join("a/FP/tensors.bin")).unwrap(), fs::read(d.join("b/FP/tensors.bin")).unwrap());
}

#[test]
fn empty_schedule_is_a_noop() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let cfg = CONFIG.split("[[schedule.stages]]").next().unwrap().to_string();
    fs::write(d.join("run.toml"), cfg).unwrap();
    let o = qnet(d, &["quantize", "--config", "run.toml", "--out", "out"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing to do"));
}
