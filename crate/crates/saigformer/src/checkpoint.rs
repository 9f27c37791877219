//! Checkpoint files: a versioned JSON header (config + parameter manifest)
//! followed by a raw little-endian float payload.
//!
//! Layout: magic `SAIG`, `u32` header length, header JSON, payload bytes.
//! Manifest offsets must be contiguous and gap-free; save/load round-trips
//! are byte-identical. Training snapshots append the optimizer moments as
//! `optim.m.*` / `optim.v.*` entries plus a `train_state` header section so
//! interrupted runs resume exactly.
//!
//! The payload dtype follows the precision the model was built with: `f32`
//! in the working precision, `f64` in verification mode (a `f32` payload may
//! be widened into a `f64` session; the reverse is refused as lossy).

use crate::network::{init_model, ModelConfig, ModelWeights};
use crate::nn::ParamSet;
use crate::tensor::{Elem, Tensor, TensorError};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SAIG";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unknown checkpoint format version {0}")]
    UnknownVersion(u32),
    #[error("file is truncated ({0})")]
    Truncated(String),
    #[error("payload dtype {file} cannot be loaded at precision {requested} (lossy)")]
    DtypeMismatch {
        file: String,
        requested: &'static str,
    },
    #[error("manifest not contiguous at '{name}': expected offset {expected}, got {got}")]
    ManifestGap { name: String, expected: u64, got: u64 },
    #[error("payload length mismatch: header says {expected}, file has {got}")]
    PayloadLength { expected: u64, got: u64 },
    #[error("parameter layout mismatch: {0}")]
    ParamMismatch(String),
    #[error("checkpoint config differs in fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),
    #[error("checkpoint has no training state to resume from")]
    NoTrainState,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 4],
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub adam_step: u64,
    pub train_config: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
    payload_len: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_state: Option<TrainState>,
}

fn elem_size(dtype: &str) -> usize {
    match dtype {
        "f64" => 8,
        _ => 4,
    }
}

fn push_elem<E: Elem>(payload: &mut Vec<u8>, v: E) {
    if E::DTYPE == "f64" {
        payload.extend_from_slice(&v.to_f64().to_le_bytes());
    } else {
        payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
}

struct PayloadWriter {
    manifest: Vec<ManifestEntry>,
    payload: Vec<u8>,
}

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter {
            manifest: Vec::new(),
            payload: Vec::new(),
        }
    }

    fn add<E: Elem>(&mut self, name: &str, t: &Tensor<E>) {
        self.manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().0,
            offset: self.payload.len() as u64,
        });
        for v in t.data() {
            push_elem(&mut self.payload, *v);
        }
    }
}

fn write_file(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(8 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(payload);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn save_model<E: Elem>(w: &ModelWeights<E>, path: &Path) -> Result<()> {
    save_with_state(w, None, path)
}

/// Save weights plus optional optimizer state (`(m, v, train_state)`).
pub fn save_with_state<E: Elem>(
    w: &ModelWeights<E>,
    state: Option<(&[Vec<E>], &[Vec<E>], TrainState)>,
    path: &Path,
) -> Result<()> {
    let mut pw = PayloadWriter::new();
    w.for_each_param(&mut |name, t| pw.add(name, t));
    let mut train_state = None;
    if let Some((m, v, ts)) = state {
        let mut names = Vec::new();
        w.for_each_param(&mut |name, _| names.push(name.to_string()));
        for (name, vec) in names.iter().zip(m) {
            let t = Tensor::<E>::from_vec(
                crate::tensor::Shape::new(1, 1, 1, vec.len()),
                vec.clone(),
                false,
            )?;
            pw.add(&format!("optim.m.{name}"), &t);
        }
        for (name, vec) in names.iter().zip(v) {
            let t = Tensor::<E>::from_vec(
                crate::tensor::Shape::new(1, 1, 1, vec.len()),
                vec.clone(),
                false,
            )?;
            pw.add(&format!("optim.v.{name}"), &t);
        }
        train_state = Some(ts);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: E::DTYPE.to_string(),
        config: w.config.clone(),
        manifest: pw.manifest,
        payload_len: pw.payload.len() as u64,
        train_state,
    };
    write_file(path, &header, &pw.payload)
}

struct LoadedFile {
    header: Header,
    payload: Vec<u8>,
}

fn read_file(path: &Path) -> Result<LoadedFile> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let json_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + json_len {
        return Err(CheckpointError::Truncated("header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + json_len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnknownVersion(header.format_version));
    }
    let payload = bytes[8 + json_len..].to_vec();
    if payload.len() as u64 != header.payload_len {
        return Err(CheckpointError::PayloadLength {
            expected: header.payload_len,
            got: payload.len() as u64,
        });
    }
    // Manifest must be contiguous and gap-free.
    let esize = elem_size(&header.dtype) as u64;
    let mut expected = 0u64;
    for entry in &header.manifest {
        if entry.offset != expected {
            return Err(CheckpointError::ManifestGap {
                name: entry.name.clone(),
                expected,
                got: entry.offset,
            });
        }
        let numel: usize = entry.shape.iter().product();
        expected += numel as u64 * esize;
    }
    if expected != header.payload_len {
        return Err(CheckpointError::PayloadLength {
            expected,
            got: header.payload_len,
        });
    }
    Ok(LoadedFile { header, payload })
}

fn decode_values<E: Elem>(file: &LoadedFile, entry: &ManifestEntry) -> Result<Vec<E>> {
    let esize = elem_size(&file.header.dtype);
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + numel * esize;
    if end > file.payload.len() {
        return Err(CheckpointError::Truncated(entry.name.clone()));
    }
    let raw = &file.payload[start..end];
    let values = match (file.header.dtype.as_str(), E::DTYPE) {
        ("f32", _) => raw
            .chunks_exact(4)
            .map(|b| E::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect(),
        ("f64", "f64") => raw
            .chunks_exact(8)
            .map(|b| E::from_f64(f64::from_le_bytes(b.try_into().unwrap())))
            .collect(),
        (other, requested) => {
            return Err(CheckpointError::DtypeMismatch {
                file: other.to_string(),
                requested,
            })
        }
    };
    Ok(values)
}

/// Load model weights. When `expected` is given, the stored config must
/// match it exactly; differing fields are listed in the error.
pub fn load_model<E: Elem>(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<ModelWeights<E>> {
    let (w, _) = load_model_inner(path, expected)?;
    Ok(w)
}

fn load_model_inner<E: Elem>(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(ModelWeights<E>, LoadedFile)> {
    let file = read_file(path)?;
    if let Some(exp) = expected {
        let diffs = exp.diff(&file.header.config);
        if !diffs.is_empty() {
            return Err(CheckpointError::ConfigMismatch(
                diffs.iter().map(|s| s.to_string()).collect(),
            ));
        }
    }
    let mut model = init_model::<E>(&file.header.config)?;
    let weight_entries: Vec<&ManifestEntry> = file
        .header
        .manifest
        .iter()
        .filter(|e| !e.name.starts_with("optim."))
        .collect();
    let mut idx = 0;
    let mut err: Option<CheckpointError> = None;
    model.for_each_param_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        if idx >= weight_entries.len() {
            err = Some(CheckpointError::ParamMismatch(format!(
                "file has no entry for parameter '{name}'"
            )));
            return;
        }
        let entry = weight_entries[idx];
        if entry.name != name || entry.shape != t.shape().0 {
            err = Some(CheckpointError::ParamMismatch(format!(
                "expected '{name}' {:?}, file has '{}' {:?}",
                t.shape().0,
                entry.name,
                entry.shape
            )));
            return;
        }
        match decode_values::<E>(&file, entry) {
            Ok(values) => match Tensor::from_vec(t.shape(), values, true) {
                Ok(nt) => *t = nt,
                Err(e) => err = Some(e.into()),
            },
            Err(e) => err = Some(e),
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != weight_entries.len() {
        return Err(CheckpointError::ParamMismatch(format!(
            "file has {} extra weight entries",
            weight_entries.len() - idx
        )));
    }
    Ok((model, file))
}

/// Load a training snapshot: weights, Adam moments and the training state.
#[allow(clippy::type_complexity)]
pub fn load_snapshot<E: Elem>(
    path: &Path,
) -> Result<(ModelWeights<E>, Vec<Vec<E>>, Vec<Vec<E>>, TrainState)> {
    let (model, file) = load_model_inner::<E>(path, None)?;
    let state = file
        .header
        .train_state
        .clone()
        .ok_or(CheckpointError::NoTrainState)?;
    let mut names = Vec::new();
    model.for_each_param(&mut |name, _| names.push(name.to_string()));
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (target, store) in [("optim.m.", &mut m), ("optim.v.", &mut v)] {
        for name in &names {
            let full = format!("{target}{name}");
            let entry = file
                .header
                .manifest
                .iter()
                .find(|e| e.name == full)
                .ok_or_else(|| {
                    CheckpointError::ParamMismatch(format!("missing optimizer entry '{full}'"))
                })?;
            store.push(decode_values::<E>(&file, entry)?);
        }
    }
    Ok((model, m, v, state))
}

/// Config stored in a checkpoint, without loading the weights.
pub fn peek_config(path: &Path) -> Result<ModelConfig> {
    Ok(read_file(path)?.header.config)
}
