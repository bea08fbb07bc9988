//! Bundle checkpointing.
//!
//! Layout: magic, a JSON header (format version, task list, threshold,
//! config hash, model config), then one record per tensor. Shared
//! parameters and scores are stored once; each task contributes its
//! deployed specific branches (only those whose gate currently selects the
//! specific side), normalization, attention, and head parameters, plus the
//! normalization running statistics. Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelBundle, ModelConfig, ModelError, TaskSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint dtype {file} does not match requested {requested}")]
    DtypeMismatch { file: String, requested: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub tasks: Vec<String>,
    pub lambda: f64,
    pub config_hash: String,
    pub frozen_shared: bool,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Owner {
    Shared,
    TaskParam(usize),
    TaskBuffer(usize),
}

fn write_entry<T: Scalar>(buf: &mut Vec<u8>, owner: Owner, name: &str, t: &Tensor<T>) {
    let (kind, task) = match owner {
        Owner::Shared => (0u8, 0u16),
        Owner::TaskParam(i) => (1, i as u16),
        Owner::TaskBuffer(i) => (2, i as u16),
    };
    buf.push(kind);
    buf.extend_from_slice(&task.to_le_bytes());
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.shape().len() as u8);
    for d in t.shape() {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        v.write_le_bytes(buf);
    }
}

/// Serializes the bundle to `path` with the run's config hash in the header.
pub fn save<T: Scalar>(bundle: &ModelBundle<T>, path: &Path, config_hash: &str) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        dtype: T::DTYPE.name().to_string(),
        tasks: bundle.tasks().to_vec(),
        lambda: bundle.config().lambda,
        config_hash: config_hash.to_string(),
        frozen_shared: bundle.frozen_shared(),
        model: bundle.config().clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut body = Vec::new();
    let mut n_entries: u32 = 0;
    for (k, v) in bundle.shared_params() {
        write_entry(&mut body, Owner::Shared, k, v);
        n_entries += 1;
    }
    let pattern = bundle.gate_pattern()?;
    for task in 0..bundle.tasks().len() {
        let (keys, _) = bundle.deployed_specific_keys(task, &pattern);
        for k in keys {
            write_entry(&mut body, Owner::TaskParam(task), &k, &bundle.task_params(task)[&k]);
            n_entries += 1;
        }
        for (k, v) in bundle.task_buffers(task) {
            write_entry(&mut body, Owner::TaskBuffer(task), k, v);
            n_entries += 1;
        }
    }

    let mut out = Vec::with_capacity(16 + header_json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&n_entries.to_le_bytes());
    out.extend_from_slice(&body);
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_header(&bytes).map(|(h, _)| h)
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize), CheckpointError> {
    let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| corrupt(&format!("header json: {e}")))?;
    Ok((header, 12 + hlen))
}

/// Deserializes a bundle. Specific branches that were not deployed at save
/// time are re-materialized lazily from the shared weights when a score
/// later crosses the threshold again.
pub fn load<T: Scalar>(path: &Path) -> Result<(ModelBundle<T>, CheckpointHeader), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = CheckpointError::Corrupt;
    let (header, mut off) = parse_header(&bytes)?;
    if header.dtype != T::DTYPE.name() {
        return Err(CheckpointError::DtypeMismatch {
            file: header.dtype.clone(),
            requested: T::DTYPE.name().to_string(),
        });
    }

    let specs: Vec<TaskSpec> = header
        .tasks
        .iter()
        .map(|name| TaskSpec {
            name: name.clone(),
            coord_bias: [0.0; 3],
        })
        .collect();
    let mut bundle = ModelBundle::<T>::new(header.model.clone(), &specs, 0)?;
    for task in 0..specs.len() {
        bundle.clear_specific_branches(task);
    }

    if bytes.len() < off + 4 {
        return Err(corrupt("missing entry count".into()));
    }
    let n_entries = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    off += 4;
    let width = T::DTYPE.size_bytes();

    for _ in 0..n_entries {
        if bytes.len() < off + 5 {
            return Err(corrupt("truncated entry".into()));
        }
        let kind = bytes[off];
        let task = u16::from_le_bytes(bytes[off + 1..off + 3].try_into().unwrap()) as usize;
        let nlen = u16::from_le_bytes(bytes[off + 3..off + 5].try_into().unwrap()) as usize;
        off += 5;
        if bytes.len() < off + nlen + 1 {
            return Err(corrupt("truncated entry name".into()));
        }
        let name = std::str::from_utf8(&bytes[off..off + nlen])
            .map_err(|_| corrupt("entry name not utf8".into()))?
            .to_string();
        off += nlen;
        let ndim = bytes[off] as usize;
        off += 1;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            if bytes.len() < off + 4 {
                return Err(corrupt("truncated shape".into()));
            }
            shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let n: usize = shape.iter().product();
        if bytes.len() < off + n * width {
            return Err(corrupt(format!("truncated payload for `{name}`")));
        }
        let data: Vec<T> = (0..n)
            .map(|i| T::read_le_bytes(&bytes[off + i * width..off + (i + 1) * width]))
            .collect();
        off += n * width;
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;

        match kind {
            0 => {
                let slot = bundle
                    .shared_params_mut()
                    .get_mut(&name)
                    .ok_or_else(|| corrupt(format!("unknown shared parameter `{name}`")))?;
                if slot.shape() != tensor.shape() {
                    return Err(corrupt(format!("shape mismatch for `{name}`")));
                }
                *slot = tensor.with_grad(true);
            }
            1 => {
                if task >= header.tasks.len() {
                    return Err(corrupt(format!("entry `{name}` names task {task}")));
                }
                bundle.task_params_mut(task).insert(name, tensor.with_grad(true));
            }
            2 => {
                if task >= header.tasks.len() {
                    return Err(corrupt(format!("entry `{name}` names task {task}")));
                }
                bundle.task_buffers_mut(task).insert(name, tensor);
            }
            other => return Err(corrupt(format!("unknown entry kind {other}"))),
        }
    }
    if off != bytes.len() {
        return Err(corrupt("trailing bytes after last entry".into()));
    }
    bundle.set_frozen(header.frozen_shared);
    Ok((bundle, header))
}

/// FNV-1a over the shared parameters in store order; used to verify the
/// freeze contract bit-for-bit.
pub fn shared_param_hash<T: Scalar>(bundle: &ModelBundle<T>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for (k, v) in bundle.shared_params() {
        for b in k.as_bytes() {
            mix(*b);
        }
        let mut bytes = Vec::with_capacity(v.numel() * T::DTYPE.size_bytes());
        for x in v.data() {
            x.write_le_bytes(&mut bytes);
        }
        for b in bytes {
            mix(b);
        }
    }
    h
}
