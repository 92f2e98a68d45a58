//! Checkpoint persistence and warm-start transfer.
//!
//! On disk a checkpoint is `checkpoint.json` (manifest: tensor names,
//! shapes, byte offsets, config snapshot, checksums) plus `checkpoint.bin`
//! (one little-endian f32 blob, row-major, parameters first then optimizer
//! moments). BTreeMap ordering makes save(load(x)) byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numcore::{ParamStore, Tensor};
use crate::tokenizer::hex;

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint blob corrupt: {0}")]
    Corrupt(String),
    #[error("tensor {name}: manifest shape [{rows}, {cols}] exceeds blob")]
    OutOfBounds {
        name: String,
        rows: usize,
        cols: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    config: serde_json::Value,
    vocab_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_map_sha256: Option<String>,
    params: Vec<TensorEntry>,
    opt_m: Vec<TensorEntry>,
    opt_v: Vec<TensorEntry>,
    blob_sha256: String,
}

/// In-memory checkpoint: parameters, optional AdamW moments, bookkeeping.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    /// Snapshot of the training configuration, opaque JSON.
    pub config: serde_json::Value,
    pub vocab_sha256: String,
    pub label_map_sha256: Option<String>,
    pub params: ParamStore,
    pub opt_m: ParamStore,
    pub opt_v: ParamStore,
}

fn append_store(
    store: &ParamStore,
    blob: &mut Vec<u8>,
    entries: &mut Vec<TensorEntry>,
) {
    for (name, t) in store {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_store(
    blob: &[u8],
    entries: &[TensorEntry],
) -> Result<ParamStore, CheckpointError> {
    let mut store = ParamStore::new();
    for e in entries {
        let bytes = e.rows * e.cols * 4;
        let end = e.offset.checked_add(bytes).filter(|&end| end <= blob.len());
        let Some(end) = end else {
            return Err(CheckpointError::OutOfBounds {
                name: e.name.clone(),
                rows: e.rows,
                cols: e.cols,
            });
        };
        let data: Vec<f32> = blob[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(e.name.clone(), Tensor::from_vec(e.rows, e.cols, data));
    }
    Ok(store)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        std::fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut params = Vec::new();
        let mut opt_m = Vec::new();
        let mut opt_v = Vec::new();
        append_store(&self.params, &mut blob, &mut params);
        append_store(&self.opt_m, &mut blob, &mut opt_m);
        append_store(&self.opt_v, &mut blob, &mut opt_v);
        let manifest = Manifest {
            format_version: 1,
            step: self.step,
            config: self.config.clone(),
            vocab_sha256: self.vocab_sha256.clone(),
            label_map_sha256: self.label_map_sha256.clone(),
            params,
            opt_m,
            opt_v,
            blob_sha256: hex(&Sha256::digest(&blob)),
        };
        std::fs::write(dir.join(BLOB_FILE), &blob)?;
        std::fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let blob = std::fs::read(dir.join(BLOB_FILE))?;
        if hex(&Sha256::digest(&blob)) != manifest.blob_sha256 {
            return Err(CheckpointError::Corrupt(
                "blob checksum does not match manifest".into(),
            ));
        }
        Ok(Self {
            step: manifest.step,
            config: manifest.config,
            vocab_sha256: manifest.vocab_sha256,
            label_map_sha256: manifest.label_map_sha256,
            params: read_store(&blob, &manifest.params)?,
            opt_m: read_store(&blob, &manifest.opt_m)?,
            opt_v: read_store(&blob, &manifest.opt_v)?,
        })
    }
}

/// Content hash over names, shapes and values of a parameter store.
/// Identifies the exact model that produced derived artifacts (indexes).
pub fn store_sha256(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, t) in store {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Which tensors a warm start copied and which stayed freshly initialized.
#[derive(Debug, Clone, Default)]
pub struct TransferLog {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

/// Copies source tensors into a freshly initialized target store by name.
///
/// Name resolution bridges single-encoder and two-tower layouts: a target
/// tensor `q.X` / `s.X` / `enc.X` falls back to source `X`, and a bare `X`
/// falls back to `enc.X` then `q.X`. Shapes must match exactly; `skip`
/// short-circuits tensors that must stay fresh (heads over a changed label
/// space). Every target tensor lands in exactly one of the log's lists.
pub fn warm_start(
    target: &mut ParamStore,
    source: &ParamStore,
    skip: impl Fn(&str) -> bool,
) -> TransferLog {
    let mut log = TransferLog::default();
    for (name, t) in target.iter_mut() {
        if skip(name) {
            log.fresh.push(name.clone());
            continue;
        }
        let mut candidates: Vec<String> = vec![name.clone()];
        for prefix in ["q.", "s.", "enc."] {
            if let Some(rest) = name.strip_prefix(prefix) {
                candidates.push(rest.to_string());
            }
        }
        if !name.contains('.')
            || !["q.", "s.", "enc."]
                .iter()
                .any(|p| name.starts_with(p))
        {
            candidates.push(format!("enc.{name}"));
            candidates.push(format!("q.{name}"));
        }
        let hit = candidates
            .iter()
            .find_map(|c| source.get(c).filter(|s| s.shape() == t.shape()));
        match hit {
            Some(s) => {
                *t = s.clone();
                log.copied.push(name.clone());
            }
            None => log.fresh.push(name.clone()),
        }
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_of(pairs: &[(&str, usize, usize, f32)]) -> ParamStore {
        pairs
            .iter()
            .map(|&(n, r, c, v)| (n.to_string(), Tensor::filled(r, c, v)))
            .collect()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ckpt = Checkpoint {
            step: 42,
            config: serde_json::json!({"dim": 16}),
            vocab_sha256: "abc".into(),
            label_map_sha256: Some("def".into()),
            params: store_of(&[("b", 2, 3, 1.5), ("a", 1, 4, -0.25)]),
            opt_m: store_of(&[("a", 1, 4, 0.1)]),
            opt_v: store_of(&[("a", 1, 4, 0.2)]),
        };
        let dir = std::env::temp_dir().join("ecsearch_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let d1 = dir.join("one");
        let d2 = dir.join("two");
        ckpt.save(&d1).unwrap();
        let loaded = Checkpoint::load(&d1).unwrap();
        loaded.save(&d2).unwrap();
        for f in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(
                std::fs::read(d1.join(f)).unwrap(),
                std::fs::read(d2.join(f)).unwrap(),
                "{f} differs after roundtrip"
            );
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_blob_fails_closed() {
        let ckpt = Checkpoint {
            step: 1,
            config: serde_json::Value::Null,
            vocab_sha256: String::new(),
            label_map_sha256: None,
            params: store_of(&[("w", 4, 4, 1.0)]),
            opt_m: ParamStore::new(),
            opt_v: ParamStore::new(),
        };
        let dir = std::env::temp_dir().join("ecsearch_ckpt_trunc");
        ckpt.save(&dir).unwrap();
        let blob_path = dir.join(BLOB_FILE);
        let bytes = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            Checkpoint::load(&dir),
            Err(CheckpointError::Corrupt(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn warm_start_bridges_tower_prefixes() {
        // intent pretrain (bare names) -> retrieval finetune (towers)
        let source = store_of(&[("tok_emb", 4, 8, 3.0), ("l0.wq", 8, 8, 2.0)]);
        let mut target = store_of(&[
            ("q.tok_emb", 4, 8, 0.0),
            ("q.l0.wq", 8, 8, 0.0),
            ("s.tok_emb", 4, 8, 0.0),
            ("s.head_w", 8, 5, 0.0),
        ]);
        let log = warm_start(&mut target, &source, |_| false);
        assert_eq!(target["q.tok_emb"].at(0, 0), 3.0);
        assert_eq!(target["s.tok_emb"].at(0, 0), 3.0);
        assert_eq!(target["q.l0.wq"].at(0, 0), 2.0);
        assert_eq!(target["s.head_w"].at(0, 0), 0.0);
        assert_eq!(log.copied.len(), 3);
        assert_eq!(log.fresh, vec!["s.head_w".to_string()]);
    }

    #[test]
    fn warm_start_rejects_shape_mismatch_and_honors_skip() {
        let source = store_of(&[("head_w", 8, 7, 9.0), ("head_b", 1, 7, 9.0)]);
        let mut target = store_of(&[("head_w", 8, 7, 0.0), ("head_b", 1, 5, 0.0)]);
        let log = warm_start(&mut target, &source, |n| n == "head_w");
        // skipped by predicate even though shapes match
        assert_eq!(target["head_w"].at(0, 0), 0.0);
        // shape mismatch stays fresh
        assert_eq!(target["head_b"].at(0, 0), 0.0);
        assert!(log.copied.is_empty());
        assert_eq!(log.fresh.len(), 2);
    }
}
