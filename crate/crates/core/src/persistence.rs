//! Checkpoint files and artifact writing.
//!
//! A checkpoint is a single file:
//!
//! ```text
//! magic      8 bytes   "LPNCKPT\0"
//! version    u32 LE
//! header_len u64 LE
//! header     header_len bytes of UTF-8 JSON
//! data       raw little-endian f32 tensors, back to back
//! ```
//!
//! The header records the architecture, run metadata, the name, shape, byte
//! offset and length of every tensor, and the SHA-256 of the data section.
//! Tensors appear in name order, so saving the same state twice yields the
//! same bytes. `docs/checkpoint-format.md` has the full description.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ArchConfig, Model};
use crate::nn::optim::OptimState;
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"LPNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported checkpoint version {found}, this build reads {FORMAT_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("tensor data checksum mismatch: header says {expected}, data hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Run information stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub seed: u64,
    pub preset: Option<String>,
    /// Resolved training configuration, echoed verbatim.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub meta: CheckpointMeta,
    pub param_count: usize,
    pub has_optimizer: bool,
    pub optimizer_step: u64,
    pub tensors: Vec<TensorEntry>,
    pub data_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: Option<OptimState>,
    pub meta: CheckpointMeta,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes a model, optional optimizer state and metadata.
pub fn to_bytes(model: &Model, opt: Option<&OptimState>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut named: Vec<(String, &Tensor)> = model.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    if let Some(o) = opt {
        named.extend(o.m.iter().map(|(n, t)| (format!("{OPT_M}{n}"), t)));
        named.extend(o.v.iter().map(|(n, t)| (format!("{OPT_V}{n}"), t)));
    }
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        let offset = data.len() as u64;
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            bytes: data.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        arch: model.arch.clone(),
        meta: meta.clone(),
        param_count: model.param_count(),
        has_optimizer: opt.is_some(),
        optimizer_step: opt.map_or(0, |o| o.step),
        tensors,
        data_sha256: hex(&Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

/// Parses and verifies the header; returns it with the data section.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8]), PersistError> {
    let short = || PersistError::Malformed("file is truncated".into());
    if bytes.len() < 20 {
        return Err(short());
    }
    if &bytes[..8] != MAGIC {
        return Err(PersistError::Malformed("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(PersistError::UnsupportedVersion { found: version });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20usize.checked_add(len).ok_or_else(short)?).ok_or_else(short)?;
    let header: Header = serde_json::from_slice(json).map_err(|e| PersistError::Malformed(format!("header: {e}")))?;
    if header.format_version != version {
        return Err(PersistError::Malformed("header and preamble versions differ".into()));
    }
    let data = &bytes[20 + len..];
    let expected_len: u64 = header.tensors.iter().map(|t| t.bytes).sum();
    if data.len() as u64 != expected_len {
        return Err(PersistError::Malformed(format!(
            "data section holds {} bytes, header lists {expected_len}",
            data.len()
        )));
    }
    let actual = hex(&Sha256::digest(data));
    if actual != header.data_sha256 {
        return Err(PersistError::ChecksumMismatch {
            expected: header.data_sha256.clone(),
            actual,
        });
    }
    Ok((header, data))
}

fn tensor_at(entry: &TensorEntry, data: &[u8]) -> Result<Tensor, PersistError> {
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let bytes = data
        .get(start..start + entry.bytes as usize)
        .filter(|b| b.len() == numel * 4)
        .ok_or_else(|| PersistError::Malformed(format!("tensor {} has an inconsistent extent", entry.name)))?;
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(entry.shape.clone(), values))
}

/// The named tensors for which `keep` holds, without building a model.
pub fn tensors_from_bytes(bytes: &[u8], keep: impl Fn(&str) -> bool) -> Result<ParamStore, PersistError> {
    let (header, data) = read_header(bytes)?;
    let mut store = ParamStore::new();
    for e in header.tensors.iter().filter(|e| keep(&e.name)) {
        store.insert(e.name.clone(), tensor_at(e, data)?);
    }
    Ok(store)
}

/// Rebuilds the checkpoint, checking that its tensors are exactly those of
/// its architecture and, when given, that the architecture is `expected`.
pub fn from_bytes(bytes: &[u8], expected: Option<&ArchConfig>) -> Result<Checkpoint, PersistError> {
    let (header, data) = read_header(bytes)?;
    if let Some(arch) = expected {
        if *arch != header.arch {
            return Err(PersistError::Mismatch(format!(
                "checkpoint architecture {:?} differs from the expected {:?}",
                header.arch, arch
            )));
        }
    }
    let reference = Model::init(header.arch.clone(), 0).map_err(|e| PersistError::Malformed(e.to_string()))?;
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    for e in &header.tensors {
        let t = tensor_at(e, data)?;
        if let Some(n) = e.name.strip_prefix(OPT_M) {
            m.insert(n, t);
        } else if let Some(n) = e.name.strip_prefix(OPT_V) {
            v.insert(n, t);
        } else {
            params.insert(e.name.clone(), t);
        }
    }
    let same_layout = |s: &ParamStore| {
        s.len() == reference.params.len()
            && reference
                .params
                .iter()
                .all(|(n, t)| s.try_get(n).is_some_and(|x| x.shape() == t.shape()))
    };
    if !same_layout(&params) {
        return Err(PersistError::Mismatch("tensors do not match the recorded architecture".into()));
    }
    let opt = if header.has_optimizer {
        if !(same_layout(&m) && same_layout(&v)) {
            return Err(PersistError::Mismatch("optimizer moments do not match the parameters".into()));
        }
        Some(OptimState {
            step: header.optimizer_step,
            m,
            v,
        })
    } else {
        if !m.is_empty() || !v.is_empty() {
            return Err(PersistError::Malformed("optimizer tensors present but not declared".into()));
        }
        None
    };
    Ok(Checkpoint {
        model: Model {
            arch: header.arch,
            params,
        },
        opt,
        meta: header.meta,
    })
}

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().ok_or_else(|| PersistError::Malformed(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_checkpoint(path: &Path, model: &Model, opt: Option<&OptimState>, meta: &CheckpointMeta) -> Result<(), PersistError> {
    write_atomic(path, &to_bytes(model, opt, meta))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ArchConfig>) -> Result<Checkpoint, PersistError> {
    from_bytes(&fs::read(path).map_err(io_err(path))?, expected)
}

/// Loads only the tensors selected by `keep`, for instance `enc.` weights.
pub fn load_tensors(path: &Path, keep: impl Fn(&str) -> bool) -> Result<ParamStore, PersistError> {
    tensors_from_bytes(&fs::read(path).map_err(io_err(path))?, keep)
}

/// Appends one JSON object and a newline, flushing before returning.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<(), PersistError> {
    let mut line = serde_json::to_vec(record).map_err(|e| PersistError::Malformed(e.to_string()))?;
    line.push(b'\n');
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(&line).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// Pretty JSON written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PersistError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| PersistError::Malformed(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
