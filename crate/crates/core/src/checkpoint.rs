//! Checkpoint directories: `manifest.json` plus one raw little-endian blob per store.
//!
//! Writes go to a sibling temporary directory that is renamed into place, and loads
//! validate every hash and shape before any model is constructed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lmhead::{LmConfig, TinyLm};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamStore, StoreKind};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::textproto::Vocabulary;

pub const SCHEMA_VERSION: u32 = 1;
pub const MODEL_BLOB: &str = "model.bin";
pub const LM_BLOB: &str = "lm.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    Lm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobRecord {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: CheckpointKind,
    pub dtype: String,
    pub llm_free: bool,
    pub model_config: Option<ModelConfig>,
    pub lm_config: Option<LmConfig>,
    pub vocabulary: Vec<String>,
    pub model_hash: Option<String>,
    pub lm_hash: Option<String>,
    pub model_blob: Option<BlobRecord>,
    pub lm_blob: Option<BlobRecord>,
    /// Free-form metadata such as a pretraining report.
    pub extra: serde_json::Value,
}

fn encode_store<T: Scalar>(store: &ParamStore<T>, file: &str) -> (Vec<u8>, BlobRecord) {
    let mut bytes = Vec::with_capacity(store.num_scalars() * T::BYTES);
    let mut tensors = Vec::with_capacity(store.entries().len());
    for e in store.entries() {
        tensors.push(TensorRecord {
            name: e.name.clone(),
            rows: e.value.rows,
            cols: e.value.cols,
            offset: bytes.len(),
            frozen: e.frozen,
        });
        for &v in &e.value.data {
            v.write_le(&mut bytes);
        }
    }
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let rec = BlobRecord { file: file.into(), sha256, bytes: bytes.len(), tensors };
    (bytes, rec)
}

/// Overwrites `store` values from a verified blob. All names and shapes must match.
fn decode_into<T: Scalar>(store: &mut ParamStore<T>, rec: &BlobRecord, bytes: &[u8]) -> Result<()> {
    if rec.tensors.len() != store.entries().len() {
        return Err(Error::Corrupt(format!(
            "{} holds {} tensors, the configured model has {}",
            rec.file,
            rec.tensors.len(),
            store.entries().len()
        )));
    }
    let mut staged = Vec::with_capacity(rec.tensors.len());
    for (t, e) in rec.tensors.iter().zip(store.entries()) {
        if t.name != e.name || t.rows != e.value.rows || t.cols != e.value.cols {
            return Err(Error::Corrupt(format!(
                "tensor `{}` ({}×{}) does not match expected `{}` ({}×{})",
                t.name, t.rows, t.cols, e.name, e.value.rows, e.value.cols
            )));
        }
        let len = t.rows * t.cols * T::BYTES;
        let chunk = bytes
            .get(t.offset..t.offset + len)
            .ok_or_else(|| Error::Corrupt(format!("tensor `{}` runs past the end of {}", t.name, rec.file)))?;
        let data: Vec<T> = chunk.chunks_exact(T::BYTES).map(T::read_le).collect();
        staged.push((Mat::from_vec(t.rows, t.cols, data), t.frozen));
    }
    for (e, (m, frozen)) in store.entries_mut().iter_mut().zip(staged) {
        e.value = m;
        e.frozen = frozen;
    }
    Ok(())
}

fn write_dir(path: &Path, manifest: &Manifest, blobs: &[(String, Vec<u8>)]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&parent)?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    for (file, bytes) in blobs {
        fs::write(tmp.join(file), bytes)?;
    }
    fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    if path.exists() {
        fs::remove_dir_all(path)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_blob(dir: &Path, rec: &BlobRecord) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(&rec.file))?;
    if bytes.len() != rec.bytes {
        return Err(Error::Corrupt(format!("{} has {} bytes, manifest says {}", rec.file, bytes.len(), rec.bytes)));
    }
    let sha = hex::encode(Sha256::digest(&bytes));
    if sha != rec.sha256 {
        return Err(Error::Corrupt(format!("{} fails its checksum", rec.file)));
    }
    Ok(bytes)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != SCHEMA_VERSION {
        return Err(Error::Schema { found, expected: SCHEMA_VERSION });
    }
    Ok(serde_json::from_value(value)?)
}

fn check_dtype<T: Scalar>(m: &Manifest) -> Result<()> {
    if m.dtype != T::DTYPE {
        return Err(Error::Corrupt(format!("checkpoint dtype {} cannot be read as {}", m.dtype, T::DTYPE)));
    }
    Ok(())
}

/// Saves the model; with `llm_free` the language model tensors are omitted.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path, llm_free: bool, extra: serde_json::Value) -> Result<()> {
    let (model_bytes, model_rec) = encode_store(&model.store, MODEL_BLOB);
    let mut blobs = vec![(MODEL_BLOB.to_string(), model_bytes)];
    let mut lm_blob = None;
    let mut lm_hash = None;
    if let (Some((_, store)), false) = (&model.lm, llm_free) {
        let (b, rec) = encode_store(store, LM_BLOB);
        blobs.push((LM_BLOB.to_string(), b));
        lm_blob = Some(rec);
        lm_hash = Some(store.content_hash());
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        kind: CheckpointKind::Model,
        dtype: T::DTYPE.into(),
        llm_free: llm_free || model.lm.is_none(),
        model_config: Some(model.cfg.clone()),
        lm_config: Some(model.cfg.lm.clone()),
        vocabulary: model.vocab.tokens().to_vec(),
        model_hash: Some(model.store.content_hash()),
        lm_hash,
        model_blob: Some(model_rec),
        lm_blob,
        extra,
    };
    write_dir(path, &manifest, &blobs)
}

fn load_lm_store<T: Scalar>(dir: &Path, m: &Manifest, vocab: &Vocabulary) -> Result<Option<(TinyLm, ParamStore<T>)>> {
    let (Some(rec), Some(cfg)) = (&m.lm_blob, &m.lm_config) else { return Ok(None) };
    let bytes = read_blob(dir, rec)?;
    let mut store = ParamStore::<T>::new(StoreKind::Lm);
    let lm = TinyLm::new(&mut store, cfg, vocab.len(), 0)?;
    decode_into(&mut store, rec, &bytes)?;
    store.freeze_all();
    if let Some(h) = &m.lm_hash {
        if &store.content_hash() != h {
            return Err(Error::Corrupt("language model hash mismatch".into()));
        }
    }
    Ok(Some((lm, store)))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Model<T>> {
    let m = read_manifest(dir)?;
    check_dtype::<T>(&m)?;
    if m.kind != CheckpointKind::Model {
        return Err(Error::Corrupt(format!("{} is not a model checkpoint", dir.display())));
    }
    let cfg = m.model_config.clone().ok_or_else(|| Error::Corrupt("model checkpoint without config".into()))?;
    let rec = m.model_blob.as_ref().ok_or_else(|| Error::Corrupt("model checkpoint without tensors".into()))?;
    let bytes = read_blob(dir, rec)?;
    let vocab = Vocabulary::from_tokens(m.vocabulary.clone());
    let lm = load_lm_store::<T>(dir, &m, &vocab)?;
    let mut model = Model::new(&cfg, &vocab, lm, 0)?;
    decode_into(&mut model.store, rec, &bytes)?;
    if let Some(h) = &m.model_hash {
        if &model.store.content_hash() != h {
            return Err(Error::Corrupt("model hash mismatch".into()));
        }
    }
    Ok(model)
}

/// Saves a standalone pretrained language model.
pub fn save_lm<T: Scalar>(
    lm: &TinyLm,
    store: &ParamStore<T>,
    vocab: &Vocabulary,
    path: &Path,
    extra: serde_json::Value,
) -> Result<()> {
    let (bytes, rec) = encode_store(store, LM_BLOB);
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        kind: CheckpointKind::Lm,
        dtype: T::DTYPE.into(),
        llm_free: false,
        model_config: None,
        lm_config: Some(lm.cfg.clone()),
        vocabulary: vocab.tokens().to_vec(),
        model_hash: None,
        lm_hash: Some(store.content_hash()),
        model_blob: None,
        lm_blob: Some(rec),
        extra,
    };
    write_dir(path, &manifest, &[(LM_BLOB.to_string(), bytes)])
}

pub fn load_lm<T: Scalar>(dir: &Path) -> Result<(TinyLm, ParamStore<T>, Vocabulary, Manifest)> {
    let m = read_manifest(dir)?;
    check_dtype::<T>(&m)?;
    if m.kind != CheckpointKind::Lm {
        return Err(Error::Corrupt(format!("{} is not a language model checkpoint", dir.display())));
    }
    let vocab = Vocabulary::from_tokens(m.vocabulary.clone());
    let (lm, store) = load_lm_store::<T>(dir, &m, &vocab)?.ok_or_else(|| Error::Corrupt("language model checkpoint without tensors".into()))?;
    Ok((lm, store, vocab, m))
}
