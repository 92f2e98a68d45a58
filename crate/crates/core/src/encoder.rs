//! Pre-norm transformer encoder built on the numcore tape.
//!
//! The forward is a free function over bound parameter nodes rather than a
//! method on a model struct, so the identical code path runs in f32 for
//! training and in f64 under the finite-difference gradient checker.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numcore::{Elem, GraphOf, NodeId, ParamStoreOf, TensorOf};
use crate::tokenizer::{TokenSequence, PAD};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f32,
}

impl EncoderConfig {
    /// 2-layer/d=64 shape for fast experiments.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 64,
            dropout: 0.1,
        }
    }

    /// 4-layer/d=128 shape mirroring the small CPU-servable variant.
    pub fn paper_shape(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            dim: 128,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 512,
            max_seq_len: 64,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) {
        assert!(
            (2..=12).contains(&self.num_layers),
            "num_layers must be in 2..=12, got {}",
            self.num_layers
        );
        assert!(
            self.dim % self.num_heads == 0,
            "dim {} not divisible by {} heads",
            self.dim,
            self.num_heads
        );
        assert!(self.vocab_size > 0 && self.ffn_dim > 0 && self.max_seq_len >= 3);
        assert!((0.0..1.0).contains(&self.dropout));
    }
}

/// Parameter names bound into a graph for one forward pass.
pub type BoundParams = BTreeMap<String, NodeId>;

/// Initializes encoder parameters under `prefix` (towers use "q." / "s.",
/// the single-encoder tasks use ""). Weights ~ N(0, 0.02), layernorm gains 1,
/// every bias 0. The MLM projection is tied to `tok_emb`; only its bias is a
/// separate tensor.
pub fn init_encoder_params<E: Elem>(
    cfg: &EncoderConfig,
    seed: u64,
    prefix: &str,
) -> ParamStoreOf<E> {
    cfg.validate();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).unwrap();
    let mut randn = |rows: usize, cols: usize| -> TensorOf<E> {
        let data = (0..rows * cols)
            .map(|_| E::from_f64(normal.sample(&mut rng)))
            .collect();
        TensorOf::from_vec(rows, cols, data)
    };
    let mut store = ParamStoreOf::new();
    let put = |store: &mut ParamStoreOf<E>, name: String, t: TensorOf<E>| {
        store.insert(format!("{prefix}{name}"), t);
    };
    put(&mut store, "tok_emb".into(), randn(cfg.vocab_size, cfg.dim));
    put(&mut store, "pos_emb".into(), randn(cfg.max_seq_len, cfg.dim));
    for l in 0..cfg.num_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            put(&mut store, format!("l{l}.{w}"), randn(cfg.dim, cfg.dim));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            put(&mut store, format!("l{l}.{b}"), TensorOf::zeros(1, cfg.dim));
        }
        for ln in ["ln1", "ln2"] {
            put(
                &mut store,
                format!("l{l}.{ln}_g"),
                TensorOf::filled(1, cfg.dim, E::ONE),
            );
            put(&mut store, format!("l{l}.{ln}_b"), TensorOf::zeros(1, cfg.dim));
        }
        put(&mut store, format!("l{l}.w1"), randn(cfg.dim, cfg.ffn_dim));
        put(&mut store, format!("l{l}.b1"), TensorOf::zeros(1, cfg.ffn_dim));
        put(&mut store, format!("l{l}.w2"), randn(cfg.ffn_dim, cfg.dim));
        put(&mut store, format!("l{l}.b2"), TensorOf::zeros(1, cfg.dim));
    }
    put(&mut store, "final_ln_g".into(), TensorOf::filled(1, cfg.dim, E::ONE));
    put(&mut store, "final_ln_b".into(), TensorOf::zeros(1, cfg.dim));
    put(&mut store, "mlm_bias".into(), TensorOf::zeros(1, cfg.vocab_size));
    store
}

/// Binds every tensor of a store as a trainable node.
pub fn bind<E: Elem>(g: &mut GraphOf<E>, store: &ParamStoreOf<E>) -> BoundParams {
    store
        .iter()
        .map(|(name, t)| (name.clone(), g.param(t.clone())))
        .collect()
}

pub fn bound<'b>(params: &'b BoundParams, prefix: &str, name: &str) -> NodeId {
    let key = format!("{prefix}{name}");
    *params
        .get(&key)
        .unwrap_or_else(|| panic!("parameter {key:?} not bound"))
}

/// A batch of equal-length sequences flattened for the encoder.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `batch * seq` token ids, row-major.
    pub ids: Vec<usize>,
    /// Attention key visibility: false exactly at [PAD].
    pub key_mask: Arc<Vec<bool>>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    /// Packs sequences into one batch, trimming the shared padded tail down
    /// to the longest content length present.
    pub fn pack(seqs: &[TokenSequence]) -> Self {
        assert!(!seqs.is_empty(), "cannot pack an empty batch");
        let full = seqs[0].len();
        assert!(
            seqs.iter().all(|s| s.len() == full),
            "all sequences must be encoded to the same length"
        );
        let seq = seqs.iter().map(TokenSequence::content_len).max().unwrap();
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            for &id in &s.ids[..seq] {
                ids.push(id);
                mask.push(id != PAD);
            }
        }
        Self {
            ids,
            key_mask: Arc::new(mask),
            batch: seqs.len(),
            seq,
        }
    }

    /// Same packing for already-masked inputs (MLM), where ids come from the
    /// corruption pass but padding structure comes from the originals.
    pub fn pack_ids(rows: &[Vec<usize>]) -> Self {
        assert!(!rows.is_empty(), "cannot pack an empty batch");
        let full = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == full));
        let seq = rows
            .iter()
            .map(|r| r.iter().filter(|&&id| id != PAD).count())
            .max()
            .unwrap();
        let mut ids = Vec::with_capacity(rows.len() * seq);
        let mut mask = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            for &id in &r[..seq] {
                ids.push(id);
                mask.push(id != PAD);
            }
        }
        Self {
            ids,
            key_mask: Arc::new(mask),
            batch: rows.len(),
            seq,
        }
    }
}

/// Full encoder forward: token + position embeddings, `num_layers` pre-norm
/// blocks (attention, then GELU FFN, residuals around both, dropout on each
/// sublayer output), final layernorm. Returns `[batch*seq, dim]` hidden
/// states.
pub fn encode_batch<E: Elem>(
    g: &mut GraphOf<E>,
    cfg: &EncoderConfig,
    params: &BoundParams,
    prefix: &str,
    batch: &TokenBatch,
) -> NodeId {
    assert!(
        batch.seq <= cfg.max_seq_len,
        "sequence length {} exceeds max_seq_len {}",
        batch.seq,
        cfg.max_seq_len
    );
    for &id in &batch.ids {
        assert!(id < cfg.vocab_size, "token id {id} out of range");
    }
    let p = |name: &str| bound(params, prefix, name);
    let tok = g.gather_rows(p("tok_emb"), Arc::new(batch.ids.clone()));
    let pos_ids: Vec<usize> = (0..batch.batch)
        .flat_map(|_| 0..batch.seq)
        .collect();
    let pos = g.gather_rows(p("pos_emb"), Arc::new(pos_ids));
    let mut x = g.add(tok, pos);
    for l in 0..cfg.num_layers {
        let lp = |name: &str| p(&format!("l{l}.{name}"));
        let h = g.layer_norm(x, lp("ln1_g"), lp("ln1_b"));
        let q = g.matmul(h, lp("wq"));
        let q = g.add_row(q, lp("bq"));
        let k = g.matmul(h, lp("wk"));
        let k = g.add_row(k, lp("bk"));
        let v = g.matmul(h, lp("wv"));
        let v = g.add_row(v, lp("bv"));
        let a = g.attention(q, k, v, cfg.num_heads, batch.seq, Arc::clone(&batch.key_mask));
        let a = g.matmul(a, lp("wo"));
        let a = g.add_row(a, lp("bo"));
        let a = g.dropout(a, cfg.dropout);
        x = g.add(x, a);
        let h2 = g.layer_norm(x, lp("ln2_g"), lp("ln2_b"));
        let f = g.matmul(h2, lp("w1"));
        let f = g.add_row(f, lp("b1"));
        let f = g.gelu(f);
        let f = g.matmul(f, lp("w2"));
        let f = g.add_row(f, lp("b2"));
        let f = g.dropout(f, cfg.dropout);
        x = g.add(x, f);
    }
    g.layer_norm(x, p("final_ln_g"), p("final_ln_b"))
}

/// Pools the [CLS] (first) position of every sequence: `[batch, dim]`.
pub fn pool_first<E: Elem>(
    g: &mut GraphOf<E>,
    hidden: NodeId,
    batch: &TokenBatch,
) -> NodeId {
    let idx: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq).collect();
    g.gather_rows(hidden, Arc::new(idx))
}

/// Logits for masked positions, projected through the tied token embedding:
/// `[positions, vocab_size]`. `positions` are (row-in-batch, seq-position)
/// pairs.
pub fn mlm_logits<E: Elem>(
    g: &mut GraphOf<E>,
    params: &BoundParams,
    prefix: &str,
    hidden: NodeId,
    batch: &TokenBatch,
    positions: &[(usize, usize)],
) -> NodeId {
    let flat: Vec<usize> = positions
        .iter()
        .map(|&(b, s)| {
            assert!(b < batch.batch && s < batch.seq, "mlm position out of range");
            b * batch.seq + s
        })
        .collect();
    let gathered = g.gather_rows(hidden, Arc::new(flat));
    let logits = g.matmul_nt(gathered, bound(params, prefix, "tok_emb"));
    g.add_row(logits, bound(params, prefix, "mlm_bias"))
}
