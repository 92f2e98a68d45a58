//! Dataset loading: tab-separated corpus files, dense label remapping, and
//! the evaluation file formats.
//!
//! All loaders are pure functions of file content. Column positions are
//! configurable per loader because released click-log dumps rarely agree on
//! an order; defaults match the formats documented in the README.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tokenizer::hex;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: no usable records")]
    Empty { path: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether a malformed row aborts the load or is skipped with a warning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    Strict,
    #[default]
    Lenient,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadStats {
    pub rows: usize,
    pub kept: usize,
    pub skipped: usize,
    pub deduped: usize,
}

impl std::fmt::Display for LoadStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} rows, {} kept, {} skipped, {} deduped",
            self.rows, self.kept, self.skipped, self.deduped
        )
    }
}

/// Item title plus its (dense) category label.
#[derive(Debug, Clone)]
pub struct PretrainRecord {
    pub title: String,
    pub category_id: usize,
}

/// Query with click-weighted category labels; weights lie in (0, 1] and sum
/// to at most 1.
#[derive(Debug, Clone)]
pub struct IntentExample {
    pub query: String,
    pub labels: Vec<(usize, f32)>,
}

/// One observed (query, clicked item) pair.
#[derive(Debug, Clone)]
pub struct RetrievalPair {
    pub query: String,
    pub item_id: String,
    pub title: String,
}

#[derive(Debug, Clone)]
pub struct CatalogItem {
    pub item_id: String,
    pub title: String,
    pub category_raw: String,
}

#[derive(Debug, Clone)]
pub struct IntentEvalExample {
    pub query: String,
    pub truth: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RetrievalEvalExample {
    pub query: String,
    pub relevant: Vec<String>,
}

/// Size of the dense label space, with raw names when known.
#[derive(Debug, Clone)]
pub struct LabelSpace {
    pub size: usize,
    pub names: Option<Vec<String>>,
}

/// Bijection between raw category strings and dense 0-based ids, in order
/// of first appearance. Heads size their output dimension from `len()`.
#[derive(Debug, Clone, Default)]
pub struct LabelMap {
    dense_to_raw: Vec<String>,
    raw_to_dense: HashMap<String, usize>,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.dense_to_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dense_to_raw.is_empty()
    }

    pub fn get_or_insert(&mut self, raw: &str) -> usize {
        if let Some(&id) = self.raw_to_dense.get(raw) {
            return id;
        }
        let id = self.dense_to_raw.len();
        self.dense_to_raw.push(raw.to_string());
        self.raw_to_dense.insert(raw.to_string(), id);
        id
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.raw_to_dense.get(raw).copied()
    }

    pub fn raw(&self, dense: usize) -> Option<&str> {
        self.dense_to_raw.get(dense).map(String::as_str)
    }

    pub fn space(&self) -> LabelSpace {
        LabelSpace {
            size: self.len(),
            names: Some(self.dense_to_raw.clone()),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, raw) in self.dense_to_raw.iter().enumerate() {
            writeln!(out, "{id}\t{raw}").unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        let mut map = Self::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split('\t');
            let (id, raw) = match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(raw), None) => (id, raw),
                _ => {
                    return Err(malformed(path, i + 1, "expected `dense_id \\t raw`"));
                }
            };
            let id: usize = id
                .parse()
                .map_err(|_| malformed(path, i + 1, &format!("bad dense id {id:?}")))?;
            if id != map.len() {
                return Err(malformed(path, i + 1, &format!("non-contiguous id {id}")));
            }
            map.get_or_insert(raw);
        }
        Ok(map)
    }

    /// SHA-256 over the serialized map; a checkpointed head is only
    /// transferable when this matches.
    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_tsv().as_bytes()))
    }
}

fn malformed(path: &Path, line: usize, reason: &str) -> CorpusError {
    CorpusError::Malformed {
        path: path.display().to_string(),
        line,
        reason: reason.to_string(),
    }
}

/// Column positions for `pretrain.tsv` (`title \t category`).
#[derive(Debug, Clone, Copy)]
pub struct PretrainSchema {
    pub title_col: usize,
    pub category_col: usize,
}

impl Default for PretrainSchema {
    fn default() -> Self {
        Self {
            title_col: 0,
            category_col: 1,
        }
    }
}

/// Column positions for `retrieval_finetune.tsv` (`query \t item_id \t title`).
#[derive(Debug, Clone, Copy)]
pub struct RetrievalSchema {
    pub query_col: usize,
    pub item_id_col: usize,
    pub title_col: usize,
}

impl Default for RetrievalSchema {
    fn default() -> Self {
        Self {
            query_col: 0,
            item_id_col: 1,
            title_col: 2,
        }
    }
}

/// Column positions for `items.tsv` (`item_id \t title \t category`).
#[derive(Debug, Clone, Copy)]
pub struct ItemsSchema {
    pub item_id_col: usize,
    pub title_col: usize,
    pub category_col: usize,
}

impl Default for ItemsSchema {
    fn default() -> Self {
        Self {
            item_id_col: 0,
            title_col: 1,
            category_col: 2,
        }
    }
}

struct RowReader<'a> {
    path: &'a Path,
    mode: ParseMode,
    stats: LoadStats,
}

impl<'a> RowReader<'a> {
    fn new(path: &'a Path, mode: ParseMode) -> Self {
        Self {
            path,
            mode,
            stats: LoadStats::default(),
        }
    }

    /// Lenient mode: logs and counts the skip, returns Ok(None).
    fn reject<T>(&mut self, line: usize, reason: &str) -> Result<Option<T>, CorpusError> {
        match self.mode {
            ParseMode::Strict => Err(malformed(self.path, line, reason)),
            ParseMode::Lenient => {
                warn!("{}:{line}: skipped row: {reason}", self.path.display());
                self.stats.skipped += 1;
                Ok(None)
            }
        }
    }

    fn finish(self, kept: usize) -> Result<LoadStats, CorpusError> {
        if kept == 0 {
            return Err(CorpusError::Empty {
                path: self.path.display().to_string(),
            });
        }
        let mut stats = self.stats;
        stats.kept = kept;
        Ok(stats)
    }
}

fn field<'l>(
    cells: &[&'l str],
    col: usize,
) -> Result<&'l str, String> {
    cells
        .get(col)
        .copied()
        .ok_or_else(|| format!("missing column {col} (row has {})", cells.len()))
}

/// Loads `title \t category` rows, remapping categories through `labels`.
pub fn load_pretrain(
    path: &Path,
    schema: PretrainSchema,
    mode: ParseMode,
    labels: &mut LabelMap,
) -> Result<(Vec<PretrainRecord>, LoadStats), CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut reader = RowReader::new(path, mode);
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        reader.stats.rows += 1;
        let cells: Vec<&str> = line.split('\t').collect();
        let parsed = (|| -> Result<(String, String), String> {
            let title = field(&cells, schema.title_col)?.trim();
            let raw_cat = field(&cells, schema.category_col)?.trim();
            if title.is_empty() {
                return Err("empty title".into());
            }
            if raw_cat.is_empty() {
                return Err("empty category".into());
            }
            Ok((title.to_string(), raw_cat.to_string()))
        })();
        match parsed {
            Ok((title, raw_cat)) => records.push(PretrainRecord {
                title,
                category_id: labels.get_or_insert(&raw_cat),
            }),
            Err(reason) => {
                reader.reject::<()>(i + 1, &reason)?;
            }
        }
    }
    let stats = reader.finish(records.len())?;
    Ok((records, stats))
}

fn parse_weighted_labels(
    spec: &str,
    labels: &mut LabelMap,
) -> Result<Vec<(usize, f32)>, String> {
    let mut out: Vec<(usize, f32)> = Vec::new();
    let mut seen = HashSet::new();
    for part in spec.split(',') {
        let part = part.trim();
        let (raw, w) = part
            .rsplit_once(':')
            .ok_or_else(|| format!("label {part:?} is not `category:weight`"))?;
        let raw = raw.trim();
        if raw.is_empty() {
            return Err("empty category name".into());
        }
        let w: f32 = w
            .trim()
            .parse()
            .map_err(|_| format!("unparseable weight in {part:?}"))?;
        if !(w > 0.0 && w <= 1.0) {
            return Err(format!("weight {w} outside (0, 1]"));
        }
        let id = labels.get_or_insert(raw);
        if !seen.insert(id) {
            return Err(format!("duplicate category {raw:?} in row"));
        }
        out.push((id, w));
    }
    let sum: f32 = out.iter().map(|(_, w)| w).sum();
    if sum > 1.0 + 1e-6 {
        return Err(format!("weights sum to {sum} > 1"));
    }
    Ok(out)
}

/// Loads `query \t cat:weight[,cat:weight...]` rows.
pub fn load_intent(
    path: &Path,
    mode: ParseMode,
    labels: &mut LabelMap,
) -> Result<(Vec<IntentExample>, LoadStats), CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut reader = RowReader::new(path, mode);
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        reader.stats.rows += 1;
        let Some((query, label_spec)) = line.split_once('\t') else {
            reader.reject::<()>(i + 1, "expected `query \\t labels`")?;
            continue;
        };
        let query = query.trim();
        if query.is_empty() {
            reader.reject::<()>(i + 1, "empty query")?;
            continue;
        }
        match parse_weighted_labels(label_spec, labels) {
            Ok(parsed) => examples.push(IntentExample {
                query: query.to_string(),
                labels: parsed,
            }),
            Err(reason) => {
                reader.reject::<()>(i + 1, &reason)?;
            }
        }
    }
    let stats = reader.finish(examples.len())?;
    Ok((examples, stats))
}

/// Loads `query \t item_id \t title` rows; duplicate (query, item_id) pairs
/// keep their first occurrence.
pub fn load_retrieval(
    path: &Path,
    schema: RetrievalSchema,
    mode: ParseMode,
) -> Result<(Vec<RetrievalPair>, LoadStats), CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut reader = RowReader::new(path, mode);
    let mut pairs = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        reader.stats.rows += 1;
        let cells: Vec<&str> = line.split('\t').collect();
        let parsed = (|| -> Result<RetrievalPair, String> {
            let query = field(&cells, schema.query_col)?.trim();
            let item_id = field(&cells, schema.item_id_col)?.trim();
            let title = field(&cells, schema.title_col)?.trim();
            if query.is_empty() {
                return Err("empty query".into());
            }
            if item_id.is_empty() {
                return Err("empty item_id".into());
            }
            if title.is_empty() {
                return Err("empty title".into());
            }
            Ok(RetrievalPair {
                query: query.to_string(),
                item_id: item_id.to_string(),
                title: title.to_string(),
            })
        })();
        match parsed {
            Ok(pair) => {
                if seen.insert((pair.query.clone(), pair.item_id.clone())) {
                    pairs.push(pair);
                } else {
                    reader.stats.deduped += 1;
                }
            }
            Err(reason) => {
                reader.reject::<()>(i + 1, &reason)?;
            }
        }
    }
    let stats = reader.finish(pairs.len())?;
    Ok((pairs, stats))
}

/// Loads `item_id \t title \t category`; duplicate item_ids keep the first row.
pub fn load_items(
    path: &Path,
    schema: ItemsSchema,
    mode: ParseMode,
) -> Result<(Vec<CatalogItem>, LoadStats), CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut reader = RowReader::new(path, mode);
    let mut items = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        reader.stats.rows += 1;
        let cells: Vec<&str> = line.split('\t').collect();
        let parsed = (|| -> Result<CatalogItem, String> {
            let item_id = field(&cells, schema.item_id_col)?.trim();
            let title = field(&cells, schema.title_col)?.trim();
            let category = cells
                .get(schema.category_col)
                .copied()
                .unwrap_or("")
                .trim();
            if item_id.is_empty() {
                return Err("empty item_id".into());
            }
            if title.is_empty() {
                return Err("empty title".into());
            }
            Ok(CatalogItem {
                item_id: item_id.to_string(),
                title: title.to_string(),
                category_raw: category.to_string(),
            })
        })();
        match parsed {
            Ok(item) => {
                if seen.insert(item.item_id.clone()) {
                    items.push(item);
                } else {
                    reader.stats.deduped += 1;
                }
            }
            Err(reason) => {
                reader.reject::<()>(i + 1, &reason)?;
            }
        }
    }
    let stats = reader.finish(items.len())?;
    Ok((items, stats))
}

/// Loads `query \t cat[,cat...]` truth rows against an existing label map.
/// Categories the map does not know are dropped in lenient mode (the model
/// cannot predict them); rows left without truth are skipped.
pub fn load_intent_eval(
    path: &Path,
    mode: ParseMode,
    labels: &LabelMap,
) -> Result<(Vec<IntentEvalExample>, LoadStats), CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut reader = RowReader::new(path, mode);
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        reader.stats.rows += 1;
        let Some((query, cats)) = line.split_once('\t') else {
            reader.reject::<()>(i + 1, "expected `query \\t categories`")?;
            continue;
        };
        let query = query.trim();
        if query.is_empty() {
            reader.reject::<()>(i + 1, "empty query")?;
            continue;
        }
        let mut truth = Vec::new();
        let mut bad: Option<String> = None;
        for raw in cats.split(',') {
            let raw = raw.trim();
            match labels.get(raw) {
                Some(id) => {
                    if !truth.contains(&id) {
                        truth.push(id);
                    }
                }
                None => {
                    bad = Some(format!("unknown category {raw:?}"));
                    if mode == ParseMode::Strict {
                        break;
                    }
                }
            }
        }
        if mode == ParseMode::Strict {
            if let Some(reason) = bad {
                return Err(malformed(path, i + 1, &reason));
            }
        }
        if truth.is_empty() {
            reader.reject::<()>(i + 1, "no known categories in truth")?;
            continue;
        }
        examples.push(IntentEvalExample {
            query: query.to_string(),
            truth,
        });
    }
    let stats = reader.finish(examples.len())?;
    Ok((examples, stats))
}

/// Loads `query \t item_id[,item_id...]` relevance rows.
pub fn load_retrieval_eval(
    path: &Path,
    mode: ParseMode,
) -> Result<(Vec<RetrievalEvalExample>, LoadStats), CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut reader = RowReader::new(path, mode);
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        reader.stats.rows += 1;
        let Some((query, ids)) = line.split_once('\t') else {
            reader.reject::<()>(i + 1, "expected `query \\t item_ids`")?;
            continue;
        };
        let query = query.trim();
        let relevant: Vec<String> = ids
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if query.is_empty() || relevant.is_empty() {
            reader.reject::<()>(i + 1, "empty query or empty relevance list")?;
            continue;
        }
        examples.push(RetrievalEvalExample {
            query: query.to_string(),
            relevant,
        });
    }
    let stats = reader.finish(examples.len())?;
    Ok((examples, stats))
}
