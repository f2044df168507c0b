//! Checkpoint container.
//!
//! Layout: the 8-byte magic `CSEPCKPT`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` values in header
//! order. Offsets in the header are byte offsets into the payload.

use std::fs;
use std::path::Path;

use autograd::{ParamStore, Tensor};
use condsep::classifier::{Classifier, ClassifierConfig, ClassifierParams, PretrainReport};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"CSEPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Classifier,
    Separation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: CheckpointKind,
    config_hash: String,
    step: u64,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub step: u64,
    /// Free-form configuration the reader needs to rebuild the model.
    pub config: serde_json::Value,
    pub store: ParamStore,
}

fn ckpt_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Values are stored as `f32`; anything non-finite after narrowing is rejected.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.store.len());
        let mut payload = Vec::new();
        for (name, p) in self.store.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                offset: payload.len() as u64,
                trainable: p.trainable,
            });
            for &v in p.value.data() {
                let x = v as f32;
                if !x.is_finite() {
                    return Err(ckpt_err(format!("tensor {name} holds a value not representable as f32: {v}")));
                }
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            config_hash: self.config_hash.clone(),
            step: self.step,
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ckpt_err("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let rest = &bytes[16..];
        if len > rest.len() {
            return Err(ckpt_err(format!("header length {len} exceeds file size")));
        }
        let header: Header = serde_json::from_slice(&rest[..len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported format version {}", header.format_version)));
        }
        let payload = &rest[len..];
        let mut store = ParamStore::new();
        let mut expected = 0u64;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(ckpt_err(format!("tensor {} at offset {}, expected {expected}", e.name, e.offset)));
            }
            let end = e.offset as usize + 4 * n;
            if end > payload.len() {
                return Err(ckpt_err(format!("tensor {} runs past the payload", e.name)));
            }
            let data = payload[e.offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if store.contains(&e.name) {
                return Err(ckpt_err(format!("duplicate tensor {}", e.name)));
            }
            store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data), e.trainable);
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(ckpt_err(format!("{} trailing payload bytes", payload.len() - expected as usize)));
        }
        Ok(Checkpoint { kind: header.kind, config_hash: header.config_hash, step: header.step, config: header.config, store })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Parameters rounded through `f32` exactly as saving would store them.
    pub fn quantized(store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        for (_, p) in out.iter_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        out
    }

    /// Checks names and shapes against a reference store.
    pub fn check_against(&self, reference: &ParamStore) -> Result<()> {
        for (name, p) in reference.iter() {
            let got = self.store.get(name).ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
            if got.value.shape() != p.value.shape() {
                return Err(ckpt_err(format!("tensor {name} has shape {:?}, model expects {:?}", got.value.shape(), p.value.shape())));
            }
        }
        if let Some(extra) = self.store.names().find(|n| !reference.contains(n)) {
            return Err(ckpt_err(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    classifier: ClassifierConfig,
    report: PretrainReport,
}

pub fn classifier_checkpoint(params: &ClassifierParams, report: &PretrainReport, steps: u64) -> Result<Checkpoint> {
    let meta = ClassifierMeta { classifier: params.classifier.config.clone(), report: report.clone() };
    let config = serde_json::to_value(&meta)?;
    let hash = crate::hash_json(&config);
    Ok(Checkpoint { kind: CheckpointKind::Classifier, config_hash: hash, step: steps, config, store: params.store.clone() })
}

/// Rebuilds classifier parameters, validating every tensor shape.
pub fn load_classifier(ckpt: &Checkpoint) -> Result<ClassifierParams> {
    if ckpt.kind != CheckpointKind::Classifier {
        return Err(ckpt_err("expected a classifier checkpoint"));
    }
    let meta: ClassifierMeta = serde_json::from_value(ckpt.config.clone())?;
    let classifier = Classifier::new(meta.classifier, condsep::separator::CLASSIFIER1_PREFIX)?;
    let reference = classifier.init_params(0);
    ckpt.check_against(&reference.store)?;
    Ok(ClassifierParams { classifier, store: ckpt.store.clone() })
}
