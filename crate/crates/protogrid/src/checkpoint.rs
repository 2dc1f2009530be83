//! Model checkpoints: `PGCKPT1`, a u32 little-endian manifest length, a TOML
//! manifest, then every tensor as little-endian binary32.

use std::path::Path;

use protogrid_core::encoder::{Encoder, EncoderConfig, EncoderParams};
use protogrid_core::head::HeadWeights;
use protogrid_core::model::{InputShape, Model, ModelKind, ProtoNet, StandardNet};
use protogrid_core::prototype::{PrototypeBank, Provenance};
use protogrid_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"PGCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub channel_names: Vec<String>,
    pub class_names: Option<Vec<String>>,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankEntry {
    groups: usize,
    classes: usize,
    per_class: usize,
    dim: usize,
    grid_h: usize,
    grid_w: usize,
    location_scaling: bool,
    total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProvenanceEntry {
    prototype: usize,
    sample_id: u64,
    row: usize,
    col: usize,
    class: usize,
    channel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload that follows the manifest.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    model_kind: ModelKind,
    classes: usize,
    epsilon: f64,
    channel_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    input: InputShape,
    encoder: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bank: Option<BankEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    provenance: Vec<ProvenanceEntry>,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
}

struct Blob {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl Blob {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f32]) {
        self.entries.push(TensorEntry { name, shape, dtype: "f32".into(), offset: self.bytes.len() });
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn encoder_tensors(blob: &mut Blob, enc: &Encoder<f32>) {
    let mut cin = enc.config.in_channels;
    for (i, (st, (k, b))) in enc.config.stages.iter().zip(enc.params.kernels.iter().zip(&enc.params.biases)).enumerate() {
        blob.push(format!("encoder.stage{i}.kernel"), vec![st.kernel, st.kernel, cin, st.out_channels], k);
        blob.push(format!("encoder.stage{i}.bias"), vec![st.out_channels], b);
        cin = st.out_channels;
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut blob = Blob { bytes: Vec::new(), entries: Vec::new() };
    let model = &ckpt.model;
    encoder_tensors(&mut blob, model.encoder());
    let (bank, provenance, epsilon) = match model {
        Model::Standard(net) => {
            blob.push("head.weights".into(), vec![net.weights.inputs, net.weights.classes], &net.weights.weights);
            blob.push("head.bias".into(), vec![net.bias.len()], &net.bias);
            (None, Vec::new(), 0.0)
        }
        Model::Prototype(net) => {
            let b = &net.bank;
            blob.push("prototypes.vectors".into(), vec![b.total(), b.dim], &b.vectors);
            if let Some(s) = &b.scaling {
                blob.push("prototypes.scaling".into(), vec![b.total(), b.grid_h, b.grid_w], s);
            }
            blob.push("head.weights".into(), vec![net.head.inputs, net.head.classes], &net.head.weights);
            let provenance = b
                .provenance
                .iter()
                .enumerate()
                .filter_map(|(a, p)| {
                    p.map(|p| ProvenanceEntry {
                        prototype: a,
                        sample_id: p.sample_id,
                        row: p.row,
                        col: p.col,
                        class: p.class,
                        channel: p.channel,
                    })
                })
                .collect();
            let entry = BankEntry {
                groups: b.groups,
                classes: b.classes,
                per_class: b.per_class,
                dim: b.dim,
                grid_h: b.grid_h,
                grid_w: b.grid_w,
                location_scaling: b.scaling.is_some(),
                total: b.total(),
            };
            (Some(entry), provenance, net.epsilon as f64)
        }
    };
    let manifest = Manifest {
        version: VERSION,
        model_kind: model.kind(),
        classes: model.classes(),
        epsilon,
        channel_names: ckpt.channel_names.clone(),
        class_names: ckpt.class_names.clone(),
        input: model.input(),
        encoder: model.encoder().config.clone(),
        bank,
        provenance,
        tensors: blob.entries,
        train: ckpt.train.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(format!("checkpoint manifest: {e}")))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + text.len() + blob.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob.bytes);
    Ok(out)
}

struct Tensors<'a> {
    payload: &'a [u8],
    base: usize,
    entries: &'a [TensorEntry],
}

impl Tensors<'_> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::format(self.base, format!("checkpoint lacks tensor {name}")))?;
        if e.shape != shape || e.dtype != "f32" {
            return Err(Error::format(
                self.base + e.offset,
                format!("tensor {name} is {} {:?}, expected f32 {shape:?}", e.dtype, e.shape),
            ));
        }
        let n: usize = shape.iter().product();
        let end = e.offset.checked_add(4 * n).filter(|&end| end <= self.payload.len());
        let end = end.ok_or_else(|| Error::format(self.base + e.offset, format!("tensor {name} truncated")))?;
        Ok(self.payload[e.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

fn decode_bank(m: &Manifest, t: &Tensors<'_>) -> Result<PrototypeBank<f32>> {
    let b = m.bank.as_ref().ok_or_else(|| Error::format(0, "prototype checkpoint without a bank section"))?;
    if b.groups * b.classes * b.per_class != b.total {
        return Err(Error::format(0, "bank dimensions disagree with its total"));
    }
    let vectors = t.get("prototypes.vectors", &[b.total, b.dim])?;
    let scaling = if b.location_scaling {
        Some(t.get("prototypes.scaling", &[b.total, b.grid_h, b.grid_w])?)
    } else {
        None
    };
    let mut provenance = vec![None; b.total];
    for p in &m.provenance {
        let slot = provenance
            .get_mut(p.prototype)
            .ok_or_else(|| Error::format(0, format!("provenance for missing prototype {}", p.prototype)))?;
        *slot = Some(Provenance { sample_id: p.sample_id, row: p.row, col: p.col, class: p.class, channel: p.channel });
    }
    Ok(PrototypeBank {
        groups: b.groups,
        classes: b.classes,
        per_class: b.per_class,
        dim: b.dim,
        grid_h: b.grid_h,
        grid_w: b.grid_w,
        vectors,
        scaling,
        provenance,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(0, "not a protogrid checkpoint (bad magic)"));
    }
    let len_at = MAGIC.len();
    let len_bytes = bytes.get(len_at..len_at + 4).ok_or_else(|| Error::format(len_at, "truncated manifest length"))?;
    let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let start = len_at + 4;
    let text = bytes.get(start..start + len).ok_or_else(|| Error::format(start, "truncated manifest"))?;
    let text = std::str::from_utf8(text).map_err(|e| Error::format(start + e.valid_up_to(), "manifest is not UTF-8"))?;
    let m: Manifest = toml::from_str(text).map_err(|e| Error::format(start, format!("manifest: {e}")))?;
    if m.version != VERSION {
        return Err(Error::format(start, format!("checkpoint version {}, this build reads {VERSION}", m.version)));
    }
    let base = start + len;
    let payload = &bytes[base..];
    let t = Tensors { payload, base, entries: &m.tensors };
    let cfg = &m.encoder;
    let mut kernels = Vec::new();
    let mut biases = Vec::new();
    let mut cin = cfg.in_channels;
    for (i, st) in cfg.stages.iter().enumerate() {
        kernels.push(t.get(&format!("encoder.stage{i}.kernel"), &[st.kernel, st.kernel, cin, st.out_channels])?);
        biases.push(t.get(&format!("encoder.stage{i}.bias"), &[st.out_channels])?);
        cin = st.out_channels;
    }
    let encoder = Encoder::with_params(cfg.clone(), m.input.height, m.input.width, EncoderParams { kernels, biases })?;
    let model = match m.model_kind {
        ModelKind::StandardNn => {
            let inputs = m.input.channels * encoder.embedding_len();
            let weights = t.get("head.weights", &[inputs, m.classes])?;
            let bias = t.get("head.bias", &[m.classes])?;
            Model::Standard(StandardNet {
                input: m.input,
                encoder,
                weights: HeadWeights { inputs, classes: m.classes, weights },
                bias,
            })
        }
        kind => {
            let bank = decode_bank(&m, &t)?;
            let weights = t.get("head.weights", &[bank.total(), m.classes])?;
            Model::Prototype(ProtoNet {
                kind,
                input: m.input,
                encoder,
                head: HeadWeights { inputs: bank.total(), classes: m.classes, weights },
                bank,
                epsilon: m.epsilon as f32,
            })
        }
    };
    Ok(Checkpoint { model, channel_names: m.channel_names, class_names: m.class_names, train: m.train })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ckpt)?).map_err(Error::io(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(Error::io(path))?)
}

/// The manifest text of a checkpoint, for inspection.
pub fn manifest_text(bytes: &[u8]) -> Result<String> {
    if bytes.len() < 11 || &bytes[..7] != MAGIC {
        return Err(Error::format(0, "not a protogrid checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes")) as usize;
    let text = bytes.get(11..11 + len).ok_or_else(|| Error::format(11, "truncated manifest"))?;
    Ok(String::from_utf8_lossy(text).into_owned())
}
