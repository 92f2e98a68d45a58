//! Pre-training example generation: random-substring sampling for the
//! classification and retrieval tasks, and masked-language-model corruption.
//!
//! All randomness flows through caller-provided RNGs so example streams are
//! reproducible from a recorded seed.

use rand::Rng;
use thiserror::Error;

use crate::corpus::PretrainRecord;
use crate::tokenizer::{self, TokenSequence, Vocab, MASK, SPECIAL_TOKENS};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("cannot sample a substring from an empty title")]
    EmptyTitle,
    #[error("sequence has no maskable (non-special) tokens")]
    NoMaskableTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Random substring of the title as the synthetic query.
    Substring,
    /// The whole title as the query (the full-string ablation).
    Full,
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub max_substring_len: usize,
    pub mode: SampleMode,
    /// Replace the sampled span with [MASK] on the title side of retrieval
    /// pairs. Off by default; kept for the ablation.
    pub mask_substring_in_title: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            max_substring_len: 5,
            mode: SampleMode::Substring,
            mask_substring_in_title: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlmConfig {
    pub mask_ratio: f64,
    pub mask_token_prob: f64,
    pub random_token_prob: f64,
    pub keep_prob: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.15,
            mask_token_prob: 0.8,
            random_token_prob: 0.1,
            keep_prob: 0.1,
            seed: 0,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) {
        assert!(
            self.mask_ratio > 0.0 && self.mask_ratio < 1.0,
            "mask_ratio must lie in (0, 1)"
        );
        let sum = self.mask_token_prob + self.random_token_prob + self.keep_prob;
        assert!(
            (sum - 1.0).abs() < 1e-9,
            "replacement probabilities must sum to 1, got {sum}"
        );
    }
}

/// A sampled (or full-title) classification example.
#[derive(Debug, Clone)]
pub struct ClassificationExample {
    pub query_tokens: Vec<String>,
    pub query: String,
    pub category_id: usize,
    pub start: usize,
    pub len: usize,
}

/// A synthetic (query, title) retrieval pair; `title_tokens` carries the
/// [MASK]-substituted span when configured.
#[derive(Debug, Clone)]
pub struct RetrievalExample {
    pub query_tokens: Vec<String>,
    pub query: String,
    pub title_tokens: Vec<String>,
    pub start: usize,
    pub len: usize,
}

/// MLM-corrupted encoder input with recovery targets.
#[derive(Debug, Clone)]
pub struct MaskedSequence {
    pub input_ids: Vec<usize>,
    /// Original ids at `positions`, parallel to it.
    pub labels: Vec<usize>,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
}

/// Draws a contiguous token span: start uniform over the title, requested
/// length uniform over `1..=max_substring_len`, clamped at the title end.
pub fn sample_substring<'t, R: Rng>(
    title_tokens: &'t [String],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(usize, usize, &'t [String]), AugmentError> {
    let n = title_tokens.len();
    if n == 0 {
        return Err(AugmentError::EmptyTitle);
    }
    assert!(cfg.max_substring_len >= 1, "max_substring_len must be >= 1");
    let start = rng.random_range(0..n);
    let requested = rng.random_range(1..=cfg.max_substring_len);
    let len = requested.min(n - start);
    Ok((start, len, &title_tokens[start..start + len]))
}

/// Builds a (synthetic query, category) task example from one record.
pub fn make_classification_example<R: Rng>(
    record: &PretrainRecord,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<ClassificationExample, AugmentError> {
    let title_tokens = tokenizer::tokenize(&record.title);
    let (start, len, slice) = match cfg.mode {
        SampleMode::Full => {
            if title_tokens.is_empty() {
                return Err(AugmentError::EmptyTitle);
            }
            (0, title_tokens.len(), &title_tokens[..])
        }
        SampleMode::Substring => sample_substring(&title_tokens, cfg, rng)?,
    };
    let query_tokens = slice.to_vec();
    Ok(ClassificationExample {
        query: tokenizer::join_tokens(&query_tokens),
        query_tokens,
        category_id: record.category_id,
        start,
        len,
    })
}

/// Builds a (synthetic query, item title) retrieval pair from one record.
pub fn make_retrieval_example<R: Rng>(
    record: &PretrainRecord,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<RetrievalExample, AugmentError> {
    let title_tokens = tokenizer::tokenize(&record.title);
    let (start, len, slice) = sample_substring(&title_tokens, cfg, rng)?;
    let query_tokens = slice.to_vec();
    let mut title_side = title_tokens.clone();
    if cfg.mask_substring_in_title {
        for tok in &mut title_side[start..start + len] {
            *tok = SPECIAL_TOKENS[MASK].to_string();
        }
    }
    Ok(RetrievalExample {
        query: tokenizer::join_tokens(&query_tokens),
        query_tokens,
        title_tokens: title_side,
        start,
        len,
    })
}

/// Masks `max(1, round(mask_ratio * content))` non-special positions.
/// Per masked position the input id becomes [MASK] / a random non-special
/// token / stays unchanged, with the configured 80/10/10 probabilities.
pub fn apply_mlm_mask<R: Rng>(
    seq: &TokenSequence,
    cfg: &MlmConfig,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<MaskedSequence, AugmentError> {
    cfg.validate();
    let content = seq.content_positions();
    if content.is_empty() {
        return Err(AugmentError::NoMaskableTokens);
    }
    let k = ((cfg.mask_ratio * content.len() as f64).round() as usize)
        .max(1)
        .min(content.len());
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, content.len(), k)
        .into_iter()
        .map(|i| content[i])
        .collect();
    picks.sort_unstable();

    let first_regular = SPECIAL_TOKENS.len();
    let mut input_ids = seq.ids.clone();
    let mut labels = Vec::with_capacity(k);
    for &pos in &picks {
        labels.push(seq.ids[pos]);
        let r: f64 = rng.random();
        if r < cfg.mask_token_prob {
            input_ids[pos] = MASK;
        } else if r < cfg.mask_token_prob + cfg.random_token_prob {
            // Degenerate vocab with no regular tokens falls back to [MASK].
            if vocab.len() > first_regular {
                input_ids[pos] = rng.random_range(first_regular..vocab.len());
            } else {
                input_ids[pos] = MASK;
            }
        } // else: keep the original id
    }
    Ok(MaskedSequence {
        input_ids,
        labels,
        positions: picks,
    })
}
