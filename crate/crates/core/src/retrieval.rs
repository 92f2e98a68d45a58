//! Two-tower embedding retrieval: query/item encoders scored by inner
//! product, in-batch-negative triplet training, and exact top-k search over
//! a persisted item index.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::{self, BoundParams, EncoderConfig, TokenBatch};
use crate::numcore::{Elem, GraphOf, NodeId, ParamStoreOf, Tensor};
use crate::tokenizer::{self, hex, Vocab};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate item_id {0:?}")]
    DuplicateItem(String),
    #[error("index is empty")]
    Empty,
    #[error("index manifest mismatch: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoTowerConfig {
    pub encoder: EncoderConfig,
    /// One shared encoder serving both towers.
    pub share_weights: bool,
    /// L2-normalize embeddings (cosine scoring ablation).
    pub normalize: bool,
    pub margin: f32,
}

impl TwoTowerConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            share_weights: false,
            normalize: false,
            margin: 0.1,
        }
    }

    pub fn validate(&self) {
        self.encoder.validate();
        assert!(self.margin >= 0.0, "margin must be non-negative");
    }

    pub fn query_prefix(&self) -> &'static str {
        if self.share_weights {
            "enc."
        } else {
            "q."
        }
    }

    pub fn item_prefix(&self) -> &'static str {
        if self.share_weights {
            "enc."
        } else {
            "s."
        }
    }
}

/// Initializes tower parameters: one encoder under "enc." when shared, two
/// independently seeded encoders under "q."/"s." otherwise.
pub fn init_two_tower_params<E: Elem>(cfg: &TwoTowerConfig, seed: u64) -> ParamStoreOf<E> {
    cfg.validate();
    if cfg.share_weights {
        encoder::init_encoder_params(&cfg.encoder, seed, "enc.")
    } else {
        let mut store = encoder::init_encoder_params(&cfg.encoder, seed, "q.");
        store.extend(encoder::init_encoder_params::<E>(
            &cfg.encoder,
            seed.wrapping_add(1),
            "s.",
        ));
        store
    }
}

/// Embeds a batch through one tower: `[batch, dim]`, L2-normalized when
/// configured.
pub fn embed_batch<E: Elem>(
    g: &mut GraphOf<E>,
    cfg: &TwoTowerConfig,
    params: &BoundParams,
    prefix: &str,
    batch: &TokenBatch,
) -> NodeId {
    let hidden = encoder::encode_batch(g, &cfg.encoder, params, prefix, batch);
    let pooled = encoder::pool_first(g, hidden, batch);
    if cfg.normalize {
        g.l2_normalize_rows(pooled)
    } else {
        pooled
    }
}

/// Inner-product score `f(q, s)`; f64 accumulation, f32 result.
pub fn score(q_emb: &[f32], s_emb: &[f32]) -> f32 {
    assert_eq!(q_emb.len(), s_emb.len(), "embedding dimension mismatch");
    q_emb
        .iter()
        .zip(s_emb)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum::<f64>() as f32
}

/// Mean hinge over all in-batch triplets; row i of `s` is the positive for
/// row i of `q`, every other row serves as a negative.
pub fn in_batch_triplet_loss<E: Elem>(
    g: &mut GraphOf<E>,
    q: NodeId,
    s: NodeId,
    margin: f32,
) -> NodeId {
    let scores = g.matmul_nt(q, s);
    g.triplet_hinge(scores, E::from_f64(margin as f64))
}

/// Embeds texts in eval mode, chunked; rows follow input order.
pub fn embed_texts(
    cfg: &TwoTowerConfig,
    store: &crate::numcore::ParamStore,
    prefix: &str,
    texts: &[String],
    vocab: &Vocab,
    chunk: usize,
) -> Tensor {
    assert!(chunk >= 1);
    let mut out = Tensor::zeros(texts.len(), cfg.encoder.dim);
    let mut row = 0usize;
    for group in texts.chunks(chunk) {
        let seqs: Vec<_> = group
            .iter()
            .map(|t| tokenizer::encode(t, vocab, cfg.encoder.max_seq_len))
            .collect();
        let batch = TokenBatch::pack(&seqs);
        let mut g = GraphOf::eval();
        let params = encoder::bind(&mut g, store);
        let emb = embed_batch(&mut g, cfg, &params, prefix, &batch);
        let value = g.value(emb);
        for r in 0..value.rows() {
            out.row_mut(row).copy_from_slice(value.row(r));
            row += 1;
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    items: usize,
    dim: usize,
    normalize: bool,
    model_checksum: String,
    matrix_sha256: String,
}

/// Immutable item embeddings plus their ids; rows and ids are parallel.
#[derive(Debug, Clone)]
pub struct ItemIndex {
    item_ids: Vec<String>,
    matrix: Tensor,
    normalize: bool,
    model_checksum: String,
}

impl ItemIndex {
    pub fn build(
        item_ids: Vec<String>,
        matrix: Tensor,
        normalize: bool,
        model_checksum: String,
    ) -> Result<Self, IndexError> {
        if item_ids.is_empty() {
            return Err(IndexError::Empty);
        }
        assert_eq!(item_ids.len(), matrix.rows(), "one row per item");
        assert!(matrix.all_finite(), "index embeddings must be finite");
        let mut seen = HashSet::new();
        for id in &item_ids {
            if !seen.insert(id.as_str()) {
                return Err(IndexError::DuplicateItem(id.clone()));
            }
        }
        Ok(Self {
            item_ids,
            matrix,
            normalize,
            model_checksum,
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn model_checksum(&self) -> &str {
        &self.model_checksum
    }

    /// Exact top-k by inner product, descending; ties keep the earlier row.
    pub fn search_topk(&self, q_emb: &[f32], k: usize) -> Vec<(String, f32)> {
        assert!(k >= 1, "k must be >= 1");
        assert_eq!(q_emb.len(), self.dim(), "query dimension mismatch");
        let mut scored: Vec<(usize, f32)> = (0..self.matrix.rows())
            .map(|r| (r, score(q_emb, self.matrix.row(r))))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
            .into_iter()
            .map(|(r, s)| (self.item_ids[r].clone(), s))
            .collect()
    }

    fn paths(base: &Path) -> (PathBuf, PathBuf, PathBuf) {
        (
            base.with_extension("json"),
            base.with_extension("f32"),
            base.with_extension("ids"),
        )
    }

    /// Writes `{base}.json` (manifest), `{base}.f32` (row-major little-endian
    /// f32 matrix) and `{base}.ids` (one item id per line).
    pub fn save(&self, base: &Path) -> Result<(), IndexError> {
        if let Some(parent) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let (manifest_path, matrix_path, ids_path) = Self::paths(base);
        let mut bytes = Vec::with_capacity(self.matrix.len() * 4);
        for v in self.matrix.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let manifest = IndexManifest {
            items: self.len(),
            dim: self.dim(),
            normalize: self.normalize,
            model_checksum: self.model_checksum.clone(),
            matrix_sha256: hex(&Sha256::digest(&bytes)),
        };
        std::fs::write(&matrix_path, &bytes)?;
        std::fs::write(&ids_path, self.item_ids.join("\n") + "\n")?;
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self, IndexError> {
        let (manifest_path, matrix_path, ids_path) = Self::paths(base);
        let manifest: IndexManifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        let bytes = std::fs::read(&matrix_path)?;
        if bytes.len() != manifest.items * manifest.dim * 4 {
            return Err(IndexError::Manifest(format!(
                "matrix has {} bytes, manifest expects {}",
                bytes.len(),
                manifest.items * manifest.dim * 4
            )));
        }
        if hex(&Sha256::digest(&bytes)) != manifest.matrix_sha256 {
            return Err(IndexError::Manifest("matrix checksum mismatch".into()));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let matrix = Tensor::from_vec(manifest.items, manifest.dim, data);
        let ids_text = std::fs::read_to_string(&ids_path)?;
        let item_ids: Vec<String> = ids_text.lines().map(str::to_string).collect();
        if item_ids.len() != manifest.items {
            return Err(IndexError::Manifest(format!(
                "{} ids, manifest expects {}",
                item_ids.len(),
                manifest.items
            )));
        }
        Self::build(item_ids, matrix, manifest.normalize, manifest.model_checksum)
    }
}
