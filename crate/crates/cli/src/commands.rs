use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use qnet::archive::{self, Provenance, FLOAT_FORMAT, INTEGER_FORMAT};
use qnet::config::RunConfig;
use qnet::data::{self, Dataset, Split};
use qnet::integer::{compile_model, verify_equivalence, EquivalenceReport, IntegerModel};
use qnet::layers::{replace_bn_relu, Mode, Network};
use qnet::noise::{format_reports, noisy_eval, NoiseSpec};
use qnet::tensor::Tensor;
use qnet::train::{self, format_log, run_gradual_quantization, train_stage, EVAL_BATCH};
use qnet::{Error, Result};

use crate::Common;

const METRICS_FILE: &str = "metrics.jsonl";

struct Run {
    cfg: RunConfig,
    text: String,
    seed: u64,
    base: PathBuf,
}

impl Run {
    fn load(common: &Common) -> Result<Self> {
        let path = common.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
        let (cfg, text) = RunConfig::load(path)?;
        let seed = common.seed.unwrap_or(cfg.seed);
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Run { cfg, text, seed, base })
    }

    fn data(&self) -> Result<Dataset> {
        self.cfg.data.load(self.seed, &self.base)
    }

    fn out_dir(&self, common: &Common) -> PathBuf {
        common
            .out
            .clone()
            .or_else(|| self.cfg.out_dir.as_ref().map(|d| self.base.join(d)))
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.cfg.name))
    }

    fn provenance(&self, stage: &str) -> Provenance {
        Provenance::new(stage, self.seed, Some(&self.text))
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| Error::Usage(format!("unknown split '{s}' (train, val, test)")))
}

fn write_stage(dir: &Path, net: &Network, prov: &Provenance, log: &[train::EpochRecord]) -> Result<()> {
    archive::save_network(net, prov, dir)?;
    fs::write(dir.join(METRICS_FILE), format_log(log))?;
    Ok(())
}

fn load_float(path: &Path) -> Result<(Network, Provenance)> {
    archive::load_network(path)
}

pub fn train(common: &Common, stage: Option<String>, init: Option<PathBuf>, teacher: Option<PathBuf>, noise_aware: bool) -> Result<()> {
    let run = Run::load(common)?;
    let data = run.data()?;
    let (net, default_stage) = match &init {
        Some(p) => {
            let (n, prov) = load_float(p)?;
            (n, format!("{}-ft", prov.stage))
        }
        None => (run.cfg.network.build(run.seed)?, run.cfg.schedule.baseline.clone()),
    };
    let teacher = teacher.map(|p| load_float(&p).map(|t| t.0)).transpose()?;
    let spec = if noise_aware {
        Some(
            run.cfg
                .noise
                .train_spec(run.seed)
                .ok_or_else(|| Error::Config("--noise-aware needs noise.train_point".into()))?,
        )
    } else {
        None
    };
    if spec.is_some() && net.mode == Mode::Fp {
        return Err(Error::Usage("noise-aware training needs a quantized archive (--init)".into()));
    }
    let stage = stage.unwrap_or(default_stage);
    let tc = run.cfg.train_config(run.seed);
    let result = train_stage(&net, &data, &tc, teacher.as_ref(), spec.as_ref(), &stage)?;
    let dir = run.out_dir(common).join(&stage);
    write_stage(&dir, &result.net, &run.provenance(&stage), &result.log)?;
    let test = train::evaluate(&result.net, &data, Split::Test, None).ok();
    println!(
        "stage {stage}: best epoch {}, val acc {}, test acc {} -> {}",
        result.best_epoch,
        fmt_acc(result.best_val.map(|v| v.accuracy)),
        fmt_acc(test.map(|t| t.accuracy)),
        dir.display()
    );
    Ok(())
}

fn fmt_acc(a: Option<f32>) -> String {
    a.map_or_else(|| "n/a".into(), |a| format!("{a:.4}"))
}

pub fn quantize(common: &Common, resume: bool, stop_after: Option<String>) -> Result<()> {
    let run = Run::load(common)?;
    let mut schedule = run.cfg.schedule.clone();
    if let Some(last) = &stop_after {
        let k = schedule
            .stages
            .iter()
            .position(|s| &s.name == last)
            .ok_or_else(|| Error::Usage(format!("--stage '{last}' is not in the schedule")))?;
        schedule.stages.truncate(k + 1);
    }
    if schedule.stages.is_empty() {
        log::warn!("schedule has no stages; nothing to do");
        return Ok(());
    }
    let out = run.out_dir(common);
    let base_dir = out.join(&schedule.baseline);
    if !base_dir.join(archive::MANIFEST_FILE).exists() {
        return Err(Error::Usage(format!(
            "baseline archive {} not found; run `qnet train` first",
            base_dir.display()
        )));
    }
    let (baseline, _) = load_float(&base_dir)?;
    let data = run.data()?;
    let mut completed = BTreeMap::new();
    if resume {
        for s in &schedule.stages {
            let dir = out.join(&s.name);
            if dir.join(archive::MANIFEST_FILE).exists() {
                completed.insert(s.name.clone(), load_float(&dir)?.0);
            }
        }
    }
    let tc = run.cfg.train_config(run.seed);
    let outcome = run_gradual_quantization(&schedule, &baseline, &data, &tc, &completed, &mut |st| {
        write_stage(&out.join(&st.name), &st.net, &run.provenance(&st.name), &st.log)
    })?;
    for st in &outcome.stages {
        println!(
            "{}\tval {}\ttest {}{}",
            st.name,
            fmt_acc(st.val.map(|v| v.accuracy)),
            fmt_acc(st.test.map(|v| v.accuracy)),
            if st.resumed { "\t(resumed)" } else { "" }
        );
    }
    Ok(())
}

fn out_required(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::Usage("--out is required".into()))
}

fn fq_stage_name(stage: &str) -> String {
    if stage.starts_with('Q') {
        format!("F{stage}")
    } else {
        format!("{stage}-fq")
    }
}

pub fn transform_fq(path: &Path, common: &Common) -> Result<()> {
    let out = out_required(common)?;
    let (net, mut prov) = load_float(path)?;
    if net.mode == Mode::Fq {
        log::warn!("{} is already BN-free; writing it unchanged", path.display());
    } else {
        prov.stage = fq_stage_name(&prov.stage);
    }
    let fq = replace_bn_relu(&net)?;
    archive::save_network(&fq, &prov, out)?;
    println!(
        "{}: {} BN nodes -> {}, {} parameters -> {}",
        prov.stage,
        net.count_layers("batch_norm"),
        fq.count_layers("batch_norm"),
        net.parameter_count(),
        fq.parameter_count()
    );
    Ok(())
}

/// Inputs used to check a compiled model: the configured test split, or
/// seeded Gaussian samples when no configuration is given.
fn probe_inputs(common: &Common, shape: &[usize]) -> Result<Tensor> {
    if common.config.is_some() {
        let run = Run::load(common)?;
        let data = run.data()?;
        let idx = data.indices(Split::Test);
        if idx.is_empty() {
            return Err(Error::Data("test split is empty".into()));
        }
        if data.sample_shape != shape {
            return Err(Error::Data(format!("dataset samples {:?} do not match the model input {shape:?}", data.sample_shape)));
        }
        return Ok(data.batch(&idx).0);
    }
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
    let mut full = vec![64];
    full.extend_from_slice(shape);
    Ok(Tensor::from_fn(full, |_| StandardNormal.sample(&mut rng)))
}

fn equivalence(model: &IntegerModel, net: &Network, x: &Tensor) -> Result<EquivalenceReport> {
    let b = x.shape()[0];
    let per: usize = x.shape()[1..].iter().product();
    let mut total = EquivalenceReport::default();
    let mut agree = 0.0f64;
    for start in (0..b).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(b);
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, x.data()[start * per..end * per].to_vec())?;
        let r = verify_equivalence(model, net, &chunk)?;
        agree += r.argmax_agreement as f64 * r.samples as f64;
        if total.layers.is_empty() {
            total = r;
            continue;
        }
        total.samples += r.samples;
        total.max_logit_rel_err = total.max_logit_rel_err.max(r.max_logit_rel_err);
        for (t, l) in total.layers.iter_mut().zip(r.layers) {
            t.isolated = t.isolated.max(l.isolated);
            t.end_to_end = t.end_to_end.max(l.end_to_end);
        }
    }
    total.argmax_agreement = (agree / total.samples.max(1) as f64) as f32;
    Ok(total)
}

fn summarize(r: &EquivalenceReport) -> String {
    let mut s = String::new();
    for l in &r.layers {
        let _ = writeln!(s, "{}\tisolated {}\tend_to_end {}", l.node, l.isolated, l.end_to_end);
    }
    for (name, checked, bad) in &r.scan {
        let _ = writeln!(s, "{name}\tscan {checked} values\t{bad} mismatches");
    }
    let _ = write!(s, "argmax agreement {:.4} on {} samples", r.argmax_agreement, r.samples);
    s
}

pub fn compile_int(path: &Path, common: &Common) -> Result<()> {
    let out = out_required(common)?;
    let (net, mut prov) = load_float(path)?;
    let model = compile_model(&net)?;
    let x = probe_inputs(common, net.input_shape())?;
    let report = equivalence(&model, &net, &x)?;
    println!("{}", summarize(&report));
    if !report.ok() {
        return Err(Error::Equivalence("integer model disagrees with the fake-quant path".into()));
    }
    prov.stage = format!("{}-int", prov.stage);
    archive::save_integer(&model, &prov, out)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Archive(e.to_string()))?;
    fs::write(out.join("equivalence.json"), json + "\n")?;
    Ok(())
}

enum Loaded {
    Float(Network),
    Integer(IntegerModel),
}

fn load_any(path: &Path) -> Result<Loaded> {
    match archive::archive_format(path)?.as_str() {
        FLOAT_FORMAT => Ok(Loaded::Float(load_float(path)?.0)),
        INTEGER_FORMAT => Ok(Loaded::Integer(archive::load_integer(path)?.0)),
        other => Err(Error::Archive(format!("unsupported format {other}"))),
    }
}

fn emit(common: &Common, text: &str) -> Result<()> {
    match &common.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn infer(path: &Path, common: &Common, split: &str) -> Result<()> {
    let split = parse_split(split)?;
    let model = load_any(path)?;
    let run = Run::load(common)?;
    let data = run.data()?;
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("{} split is empty", split.as_str())));
    }
    let k = data.n_classes;
    let mut text = String::from("index\tlabel\tprediction\n");
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let logits = match &model {
            Loaded::Float(net) => net.forward(&x, false, None)?.logits_tensor().into_data(),
            Loaded::Integer(m) => m.forward(&x)?.logits,
        };
        if logits.len() != chunk.len() * k {
            return Err(Error::Data(format!("model produces {} scores per sample, dataset has {k} classes", logits.len() / chunk.len())));
        }
        for ((row, &i), &l) in logits.chunks(k).zip(chunk).zip(&labels) {
            let p = train::argmax(row);
            correct += (p == l) as usize;
            let _ = writeln!(text, "{i}\t{l}\t{p}");
        }
    }
    let _ = writeln!(text, "accuracy\t{:.6}", correct as f64 / idx.len() as f64);
    emit(common, &text)
}

pub fn noise_eval(path: &Path, common: &Common, split: &str) -> Result<()> {
    let split = parse_split(split)?;
    let run = Run::load(common)?;
    let (net, _) = load_float(path)?;
    let data = run.data()?;
    let mut rows = vec![noisy_eval(&net, &data, split, &NoiseSpec { seed: run.seed, ..NoiseSpec::zero() })?];
    for spec in run.cfg.noise.ladder_specs(run.seed) {
        rows.push(noisy_eval(&net, &data, split, &spec)?);
    }
    emit(common, &format_reports(&rows))
}

pub fn gen_data(common: &Common) -> Result<()> {
    let run = Run::load(common)?;
    if matches!(run.cfg.data, qnet::config::DataSpec::Csv { .. }) {
        return Err(Error::Config("gen-data needs a synthetic data section (sequence or image)".into()));
    }
    let out = out_required(common)?;
    let data = run.data()?;
    data::save_csv_features(&data, out)?;
    println!("{} samples, {} classes -> {}", data.len(), data.n_classes, out.display());
    Ok(())
}

pub fn verify(path: &Path, model: Option<PathBuf>, common: &Common) -> Result<()> {
    match (load_any(path)?, model) {
        (Loaded::Integer(m), Some(fq)) => {
            let (net, _) = load_float(&fq)?;
            let x = probe_inputs(common, &m.input_shape)?;
            let report = equivalence(&m, &net, &x)?;
            println!("{}", summarize(&report));
            if !report.ok() {
                return Err(Error::Equivalence("integer archive disagrees with the fq archive".into()));
            }
        }
        (Loaded::Integer(m), None) => {
            let bad: usize = m.exhaustive_scan().iter().map(|s| s.2.len()).sum();
            println!("integer archive ok: {} steps, {bad} threshold mismatches", m.steps.len());
            if bad > 0 {
                return Err(Error::Equivalence(format!("{bad} thresholds disagree with the float rule")));
            }
        }
        (Loaded::Float(net), None) => {
            println!("float archive ok: {:?} mode, {} nodes, {} parameters", net.mode, net.nodes.len(), net.parameter_count());
        }
        (Loaded::Float(_), Some(_)) => return Err(Error::Usage("--model expects the first archive to be an integer archive".into())),
    }
    Ok(())
}
