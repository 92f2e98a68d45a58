//! Character-level tokenization and vocabulary management.
//!
//! Units: after NFKC normalization and lowercasing, contiguous runs of ASCII
//! letters/digits form one token each (keeps embedded model codes like
//! "qs3518t2" atomic), every other non-whitespace codepoint is its own
//! token. This handles CJK titles without a segmenter.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range (vocab size {size})")]
    IdOutOfRange { id: usize, size: usize },
    #[error("malformed vocab file at line {line}: {reason}")]
    MalformedVocab { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable token vocabulary. Ids 0..=4 are the special tokens, in the
/// order of [`SPECIAL_TOKENS`]; the rest are corpus units ordered by
/// descending frequency, ties broken lexicographically.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    frequencies: Vec<u64>,
}

impl Vocab {
    /// Builds from an iterator of corpus texts, keeping units that occur at
    /// least `min_freq` times.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_freq: u64,
    ) -> Result<Self, TokenizerError> {
        assert!(min_freq >= 1, "min_freq must be >= 1");
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut saw_any = false;
        for text in texts {
            saw_any = true;
            for tok in tokenize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut frequencies = vec![0u64; SPECIAL_TOKENS.len()];
        for (tok, freq) in kept {
            id_to_token.push(tok);
            frequencies.push(freq);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            frequencies,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Result<&str, TokenizerError> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.id_to_token.len(),
            })
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    /// Serialized form: `id \t token \t frequency`, specials first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            writeln!(out, "{id}\t{tok}\t{}", self.frequencies[id]).unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path)?;
        let mut id_to_token = Vec::new();
        let mut frequencies = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split('\t');
            let (id, tok, freq) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(tok), Some(freq), None) => (id, tok, freq),
                _ => {
                    return Err(TokenizerError::MalformedVocab {
                        line: i + 1,
                        reason: "expected 3 tab-separated fields".into(),
                    })
                }
            };
            let id: usize = id.parse().map_err(|_| TokenizerError::MalformedVocab {
                line: i + 1,
                reason: format!("bad id {id:?}"),
            })?;
            if id != id_to_token.len() {
                return Err(TokenizerError::MalformedVocab {
                    line: i + 1,
                    reason: format!("non-contiguous id {id}"),
                });
            }
            let freq: u64 = freq.parse().map_err(|_| TokenizerError::MalformedVocab {
                line: i + 1,
                reason: format!("bad frequency {freq:?}"),
            })?;
            id_to_token.push(tok.to_string());
            frequencies.push(freq);
        }
        for (i, expected) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*expected) {
                return Err(TokenizerError::MalformedVocab {
                    line: i + 1,
                    reason: format!("special token {expected} missing at id {i}"),
                });
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            frequencies,
        })
    }

    /// SHA-256 of the serialized vocabulary; ties checkpoints to the exact
    /// vocab they were trained with.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        hex(&digest)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Splits normalized text into unit tokens. Pure; no vocabulary involved.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfkc().flat_map(char::to_lowercase).collect();
    let mut tokens = Vec::new();
    let mut run = String::new();
    for ch in normalized.chars() {
        if ch.is_ascii_alphanumeric() {
            run.push(ch);
            continue;
        }
        if !run.is_empty() {
            tokens.push(std::mem::take(&mut run));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !run.is_empty() {
        tokens.push(run);
    }
    tokens
}

/// Encoder input: fixed-length id row plus a flag per position marking
/// structural tokens ([CLS]/[SEP]/[PAD]) that augmentation must not touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub special_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions holding content tokens (eligible for MLM masking).
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.ids.len())
            .filter(|&i| !self.special_mask[i])
            .collect()
    }

    /// Count of non-[PAD] positions, [CLS] and [SEP] included.
    pub fn content_len(&self) -> usize {
        self.ids.iter().filter(|&&id| id != PAD).count()
    }
}

/// Encodes to exactly `max_seq_len` ids: `[CLS] content... [SEP] [PAD]...`,
/// truncating content to fit. OOV units become [UNK].
pub fn encode(text: &str, vocab: &Vocab, max_seq_len: usize) -> TokenSequence {
    encode_tokens(&tokenize(text), vocab, max_seq_len)
}

/// Same as [`encode`] for pre-tokenized input.
pub fn encode_tokens(tokens: &[String], vocab: &Vocab, max_seq_len: usize) -> TokenSequence {
    assert!(max_seq_len >= 3, "max_seq_len must fit [CLS] x [SEP]");
    let keep = tokens.len().min(max_seq_len - 2);
    let mut ids = Vec::with_capacity(max_seq_len);
    let mut special = Vec::with_capacity(max_seq_len);
    ids.push(CLS);
    special.push(true);
    for tok in &tokens[..keep] {
        ids.push(vocab.id_of(tok).unwrap_or(UNK));
        special.push(false);
    }
    ids.push(SEP);
    special.push(true);
    while ids.len() < max_seq_len {
        ids.push(PAD);
        special.push(true);
    }
    TokenSequence {
        ids,
        special_mask: special,
    }
}

/// Joins unit tokens back into text, inserting a space only between two
/// adjacent alphanumeric-run tokens that would otherwise merge.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut last_was_run = false;
    for tok in tokens {
        let tok = tok.as_ref();
        let is_run = !tok.is_empty() && tok.chars().all(|c| c.is_ascii_alphanumeric());
        if last_was_run && is_run {
            out.push(' ');
        }
        out.push_str(tok);
        last_was_run = is_run;
    }
    out
}

/// Reconstructs text: [PAD]/[CLS]/[SEP] are dropped, [UNK]/[MASK] render
/// literally, spacing per [`join_tokens`].
pub fn decode(ids: &[usize], vocab: &Vocab) -> Result<String, TokenizerError> {
    let mut tokens = Vec::new();
    for &id in ids {
        let tok = vocab.token_of(id)?;
        if id != PAD && id != CLS && id != SEP {
            tokens.push(tok);
        }
    }
    Ok(join_tokens(&tokens))
}
