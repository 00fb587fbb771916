//! On-disk model archives.
//!
//! An archive is a directory holding `manifest.json` and one binary blob.
//! The manifest describes the graph, lists every tensor with its dtype,
//! shape and byte range in the blob, and carries the blob's SHA-256.
//! Numbers in the blob are little-endian. Encoding is deterministic, so
//! save → load → save reproduces both files byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::integer::{accumulator_bits, ConvGeometry, IntegerModel, Step, ThresholdPlan};
use crate::layers::{Layer, Mode, Network, Node, ParamStore};
use crate::quant;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
pub const FLOAT_FORMAT: &str = "qnet-float-v1";
pub const INTEGER_FORMAT: &str = "qnet-integer-v1";

/// Where an archive came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    #[serde(default)]
    pub stage: String,
    #[serde(default)]
    pub seed: u64,
    /// SHA-256 of the run configuration text, if any.
    #[serde(default)]
    pub config_sha256: Option<String>,
    #[serde(default)]
    pub tool_version: String,
}

impl Provenance {
    pub fn new(stage: &str, seed: u64, config_text: Option<&str>) -> Self {
        Provenance {
            stage: stage.into(),
            seed,
            config_sha256: config_text.map(sha256_hex),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(data.as_ref()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
    I64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I8 => 1,
            DType::I64 => 8,
        }
    }
}

/// One tensor in the blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    #[serde(default)]
    pub trainable: bool,
    #[serde(default)]
    pub decay: bool,
}

impl BlobEntry {
    pub fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
    }

    pub fn byte_len(&self) -> Option<usize> {
        self.numel()?.checked_mul(self.dtype.width())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I64(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub provenance: Provenance,
    pub mode: Mode,
    pub input_shape: Vec<usize>,
    /// Float archives: the graph.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<Node>,
    /// Integer archives: one step per node, with names.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<NamedStep>,
    pub tensors: Vec<BlobEntry>,
    pub blob_bytes: usize,
    pub blob_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedStep {
    pub name: String,
    pub step: Step,
}

/// Parses manifest bytes; never panics on malformed input.
pub fn decode_manifest(bytes: &[u8]) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(bytes).map_err(|e| Error::Archive(format!("manifest: {e}")))?;
    if m.format != FLOAT_FORMAT && m.format != INTEGER_FORMAT {
        return Err(Error::Archive(format!("unknown archive format '{}'", m.format)));
    }
    Ok(m)
}

/// Slices the blob into typed tensors after checking size, checksum and
/// that entries tile the blob in order without gaps or overlaps.
pub fn decode_blob(manifest: &Manifest, blob: &[u8]) -> Result<Vec<BlobData>> {
    let err = |m: String| Err(Error::Archive(m));
    if blob.len() != manifest.blob_bytes {
        return err(format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes));
    }
    if sha256_hex(blob) != manifest.blob_sha256 {
        return err("blob checksum mismatch".into());
    }
    let mut cursor = 0usize;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let Some(len) = e.byte_len() else {
            return err(format!("tensor '{}' size overflows", e.name));
        };
        if e.offset != cursor || cursor.checked_add(len).is_none_or(|end| end > blob.len()) {
            return err(format!("tensor '{}' has a bad byte range", e.name));
        }
        let bytes = &blob[cursor..cursor + len];
        out.push(match e.dtype {
            DType::F32 => BlobData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I8 => BlobData::I8(bytes.iter().map(|&b| b as i8).collect()),
            DType::I64 => BlobData::I64(bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
        });
        cursor += len;
    }
    if cursor != blob.len() {
        return err(format!("{} trailing blob bytes", blob.len() - cursor));
    }
    Ok(out)
}

#[derive(Default)]
struct BlobWriter {
    entries: Vec<BlobEntry>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, data: BlobData, trainable: bool, decay: bool) {
        let offset = self.bytes.len();
        let dtype = match data {
            BlobData::F32(v) => {
                v.iter().for_each(|x| self.bytes.extend_from_slice(&x.to_le_bytes()));
                DType::F32
            }
            BlobData::I8(v) => {
                self.bytes.extend(v.iter().map(|&x| x as u8));
                DType::I8
            }
            BlobData::I64(v) => {
                v.iter().for_each(|x| self.bytes.extend_from_slice(&x.to_le_bytes()));
                DType::I64
            }
        };
        self.entries.push(BlobEntry {
            name,
            dtype,
            shape,
            offset,
            trainable,
            decay,
        });
    }

    fn push_params(&mut self, params: &ParamStore) {
        for p in params.iter() {
            self.push(p.name.clone(), p.tensor.shape().to_vec(), BlobData::F32(p.tensor.data().to_vec()), p.trainable, p.decay);
        }
    }
}

/// Serialized archive contents: manifest bytes and blob bytes.
pub struct Encoded {
    pub manifest: Vec<u8>,
    pub blob: Vec<u8>,
}

fn finish(mut manifest: Manifest, w: BlobWriter) -> Result<Encoded> {
    manifest.blob_bytes = w.bytes.len();
    manifest.blob_sha256 = sha256_hex(&w.bytes);
    manifest.tensors = w.entries;
    let mut text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Archive(e.to_string()))?;
    text.push(b'\n');
    Ok(Encoded { manifest: text, blob: w.bytes })
}

fn params_from(entries: &[BlobEntry], data: Vec<BlobData>) -> Result<ParamStore> {
    let mut params = ParamStore::default();
    for (e, d) in entries.iter().zip(data) {
        let BlobData::F32(v) = d else {
            return Err(Error::Archive(format!("parameter '{}' must be f32", e.name)));
        };
        let t = Tensor::new(e.shape.clone(), v).map_err(|err| Error::Archive(err.to_string()))?;
        params.push(e.name.clone(), t, e.trainable, e.decay);
    }
    Ok(params)
}

pub fn encode_network(net: &Network, provenance: &Provenance) -> Result<Encoded> {
    let mut w = BlobWriter::default();
    w.push_params(&net.params);
    let manifest = Manifest {
        format: FLOAT_FORMAT.into(),
        provenance: provenance.clone(),
        mode: net.mode,
        input_shape: net.input_shape().to_vec(),
        nodes: net.nodes.clone(),
        steps: vec![],
        tensors: vec![],
        blob_bytes: 0,
        blob_sha256: String::new(),
    };
    finish(manifest, w)
}

pub fn decode_network(manifest: &[u8], blob: &[u8]) -> Result<(Network, Provenance)> {
    let m = decode_manifest(manifest)?;
    if m.format != FLOAT_FORMAT {
        return Err(Error::Archive(format!("expected a {FLOAT_FORMAT} archive, got {}", m.format)));
    }
    let data = decode_blob(&m, blob)?;
    let params = params_from(&m.tensors, data)?;
    let net = Network::new(m.nodes, params, m.mode).map_err(|e| Error::Archive(format!("invalid graph: {e}")))?;
    if net.input_shape() != m.input_shape.as_slice() {
        return Err(Error::Archive("input shape disagrees with the graph".into()));
    }
    Ok((net, m.provenance))
}

pub fn encode_integer(model: &IntegerModel, provenance: &Provenance) -> Result<Encoded> {
    let mut w = BlobWriter::default();
    w.push_params(&model.params);
    for (i, step) in model.steps.iter().enumerate() {
        let name = &model.names[i];
        match step {
            Step::Conv { plan, .. } => {
                w.push(format!("{name}.weight_codes"), plan.weight_shape.clone(), BlobData::I8(plan.weights.clone()), false, false);
                let t = &plan.thresholds;
                w.push(format!("{name}.thresholds"), vec![t.thresholds.len()], BlobData::I64(t.thresholds.clone()), false, false);
            }
            Step::Requant { plan, .. } => {
                let t = &plan.thresholds;
                w.push(format!("{name}.thresholds"), vec![t.thresholds.len()], BlobData::I64(t.thresholds.clone()), false, false);
            }
            _ => {}
        }
    }
    let manifest = Manifest {
        format: INTEGER_FORMAT.into(),
        provenance: provenance.clone(),
        mode: Mode::Fq,
        input_shape: model.input_shape.clone(),
        nodes: vec![],
        steps: model
            .steps
            .iter()
            .zip(&model.names)
            .map(|(s, n)| NamedStep { name: n.clone(), step: s.clone() })
            .collect(),
        tensors: vec![],
        blob_bytes: 0,
        blob_sha256: String::new(),
    };
    finish(manifest, w)
}

/// Decodes and structurally checks an integer archive. Weight codes must lie
/// on the weight grid, thresholds must be sorted and sized for the output
/// code range, and every step may only read earlier steps.
pub fn decode_integer(manifest: &[u8], blob: &[u8]) -> Result<(IntegerModel, Provenance)> {
    let m = decode_manifest(manifest)?;
    if m.format != INTEGER_FORMAT {
        return Err(Error::Archive(format!("expected a {INTEGER_FORMAT} archive, got {}", m.format)));
    }
    let bad = |s: String| Error::Archive(s);
    let data = decode_blob(&m, blob)?;
    let mut by_name: BTreeMap<&str, (&BlobEntry, BlobData)> = BTreeMap::new();
    let mut param_entries = Vec::new();
    let mut param_data = Vec::new();
    for (e, d) in m.tensors.iter().zip(data) {
        if e.name.ends_with(".weight_codes") || e.name.ends_with(".thresholds") {
            if by_name.insert(&e.name, (e, d)).is_some() {
                return Err(bad(format!("duplicate tensor '{}'", e.name)));
            }
        } else {
            param_entries.push(e.clone());
            param_data.push(d);
        }
    }
    let params = params_from(&param_entries, param_data)?;
    let mut take = |key: String| by_name.remove(key.as_str()).ok_or_else(|| bad(format!("missing tensor '{key}'")));
    let thresholds_of = |(e, d): (&BlobEntry, BlobData), lo: i32, hi: i32| -> Result<ThresholdPlan> {
        let BlobData::I64(t) = d else {
            return Err(bad(format!("'{}' must be i64", e.name)));
        };
        if t.len() as i64 != hi as i64 - lo as i64 || t.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad(format!("'{}' is not a sorted table of {} thresholds", e.name, hi as i64 - lo as i64)));
        }
        Ok(ThresholdPlan { lo_code: lo, thresholds: t })
    };

    let (mut names, mut steps) = (Vec::new(), Vec::new());
    if m.steps.is_empty() || !matches!(m.steps[0].step, Step::Input) {
        return Err(bad("first step must be the input".into()));
    }
    for (i, ns) in m.steps.into_iter().enumerate() {
        let NamedStep { name, mut step } = ns;
        let earlier = |j: usize| if j < i { Ok(()) } else { Err(bad(format!("step '{name}' reads step {j}"))) };
        match &mut step {
            Step::Input => {
                if i != 0 {
                    return Err(bad("input step must come first".into()));
                }
            }
            Step::Float { layer, inputs } => {
                inputs.iter().try_for_each(|&j| earlier(j))?;
                let supported = matches!(layer, Layer::Dense { .. } | Layer::GlobalAvgPool);
                if !supported || inputs.len() != 1 {
                    return Err(bad(format!("float step '{name}' must be dense or pooling with one input")));
                }
                for id in layer.param_ids_mut() {
                    if *id >= params.len() {
                        return Err(bad(format!("float step '{name}' references missing parameter {id}")));
                    }
                }
            }
            Step::Entry { input, quant } => {
                earlier(*input)?;
                check_quant(quant, &name)?;
            }
            Step::Conv { input, plan } => {
                earlier(*input)?;
                for q in [&plan.weight_quant, &plan.input_quant, &plan.output_quant] {
                    check_quant(q, &name)?;
                }
                let rank_ok = match plan.geometry {
                    ConvGeometry::Conv1d { dilation, .. } => plan.weight_shape.len() == 3 && dilation > 0,
                    ConvGeometry::Conv2d { stride, .. } => plan.weight_shape.len() == 4 && stride > 0,
                };
                if !rank_ok || plan.weight_shape.contains(&0) {
                    return Err(bad(format!("step '{name}' has an invalid convolution geometry")));
                }
                let (e, d) = take(format!("{name}.weight_codes"))?;
                let BlobData::I8(wc) = d else {
                    return Err(bad(format!("'{}' must be i8", e.name)));
                };
                let nw = plan.weight_quant.levels() as i32;
                if e.shape != plan.weight_shape || wc.iter().any(|&c| (c as i32).abs() > nw) {
                    return Err(bad(format!("'{}' does not match the weight grid", e.name)));
                }
                plan.weights = wc;
                let k = quant::mac_scale(plan.weight_quant.scale(), plan.weight_quant.levels(), plan.input_quant.scale(), plan.input_quant.levels());
                if k.to_bits() != plan.k.to_bits() {
                    return Err(bad(format!("step '{name}': stored MAC scale disagrees with its quantizers")));
                }
                let (lo, hi) = plan.output_quant.code_bounds();
                plan.thresholds = thresholds_of(take(format!("{name}.thresholds"))?, lo, hi)?;
                let expect = accumulator_bits(plan.weight_quant.levels(), plan.input_quant.levels(), plan.fan_in());
                if plan.acc_bits != expect {
                    return Err(bad(format!("step '{name}': accumulator width {} should be {expect}", plan.acc_bits)));
                }
            }
            Step::Requant { input, plan } => {
                earlier(*input)?;
                check_quant(&plan.input_quant, &name)?;
                check_quant(&plan.output_quant, &name)?;
                let (lo, hi) = plan.output_quant.code_bounds();
                plan.thresholds = thresholds_of(take(format!("{name}.thresholds"))?, lo, hi)?;
            }
            Step::AddClip { a, b, quant } => {
                earlier(*a)?;
                earlier(*b)?;
                check_quant(quant, &name)?;
            }
            Step::Alias { input } => earlier(*input)?,
        }
        names.push(name);
        steps.push(step);
    }
    if let Some(k) = by_name.keys().next() {
        return Err(bad(format!("unused tensor '{k}'")));
    }
    if !matches!(steps.last(), Some(Step::Float { .. })) {
        return Err(bad("last step must be a float op producing logits".into()));
    }
    if m.input_shape.is_empty() || m.input_shape.contains(&0) {
        return Err(bad("input shape must be non-empty".into()));
    }
    Ok((
        IntegerModel {
            input_shape: m.input_shape,
            names,
            steps,
            params,
        },
        m.provenance,
    ))
}

fn check_quant(q: &quant::QuantConfig, name: &str) -> Result<()> {
    quant::QuantConfig::new(q.bits, q.lower, q.log_scale)
        .map(|_| ())
        .map_err(|e| Error::Archive(format!("step '{name}': {e}")))
}

fn write_dir(dir: &Path, enc: &Encoded) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), &enc.manifest)?;
    fs::write(dir.join(BLOB_FILE), &enc.blob)?;
    Ok(())
}

fn read_dir(dir: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let read = |f: &str| fs::read(dir.join(f)).map_err(|e| Error::Archive(format!("{}: {e}", dir.join(f).display())));
    Ok((read(MANIFEST_FILE)?, read(BLOB_FILE)?))
}

pub fn save_network(net: &Network, provenance: &Provenance, dir: &Path) -> Result<()> {
    write_dir(dir, &encode_network(net, provenance)?)
}

pub fn load_network(dir: &Path) -> Result<(Network, Provenance)> {
    let (m, b) = read_dir(dir)?;
    decode_network(&m, &b)
}

pub fn save_integer(model: &IntegerModel, provenance: &Provenance, dir: &Path) -> Result<()> {
    write_dir(dir, &encode_integer(model, provenance)?)
}

pub fn load_integer(dir: &Path) -> Result<(IntegerModel, Provenance)> {
    let (m, b) = read_dir(dir)?;
    decode_integer(&m, &b)
}

/// Reads the manifest only, to tell float and integer archives apart.
pub fn archive_format(dir: &Path) -> Result<String> {
    let bytes = fs::read(dir.join(MANIFEST_FILE)).map_err(|e| Error::Archive(format!("{}: {e}", dir.display())))?;
    decode_manifest(&bytes).map(|m| m.format)
}
