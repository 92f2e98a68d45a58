//! Evaluation metrics: set precision/recall/F1 and NDCG@k for intent
//! detection, P@k/R@k for retrieval. Everything macro-averages over queries;
//! per-query breakdowns are exposed for the self-consistency checks and the
//! report files.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Per-query precision/recall/F1 under set semantics. Empty predictions
/// give P = 0; F1 = 0 whenever P + R = 0.
pub fn prf1_per_query<T: Eq + Hash>(
    predicted: &[Vec<T>],
    truth: &[Vec<T>],
) -> Vec<(f64, f64, f64)> {
    assert_eq!(
        predicted.len(),
        truth.len(),
        "one prediction set per truth set"
    );
    predicted
        .iter()
        .zip(truth)
        .map(|(pred, tru)| {
            assert!(!tru.is_empty(), "truth sets must be non-empty");
            let pred: HashSet<&T> = pred.iter().collect();
            let tru: HashSet<&T> = tru.iter().collect();
            let hits = pred.intersection(&tru).count() as f64;
            let p = if pred.is_empty() {
                0.0
            } else {
                hits / pred.len() as f64
            };
            let r = hits / tru.len() as f64;
            let f1 = if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            };
            (p, r, f1)
        })
        .collect()
}

/// Macro-averaged (P, R, F1).
pub fn set_prf1<T: Eq + Hash>(predicted: &[Vec<T>], truth: &[Vec<T>]) -> (f64, f64, f64) {
    let per = prf1_per_query(predicted, truth);
    let n = per.len() as f64;
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for (qp, qr, qf) in &per {
        p += qp;
        r += qr;
        f += qf;
    }
    (p / n, r / n, f / n)
}

/// Binary-gain NDCG@k for one query: DCG over the first k unique ranked
/// entries, normalized by the ideal DCG with min(|truth|, k) ones.
pub fn ndcg_at_k_single<T: Eq + Hash>(ranked: &[T], truth: &[T], k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    assert!(!truth.is_empty(), "truth must be non-empty");
    let truth: HashSet<&T> = truth.iter().collect();
    let mut seen: HashSet<&T> = HashSet::new();
    let mut dcg = 0.0f64;
    let mut rank = 0usize;
    for item in ranked {
        if !seen.insert(item) {
            continue; // duplicates don't occupy ranks
        }
        rank += 1;
        if rank > k {
            break;
        }
        if truth.contains(item) {
            dcg += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    let ideal = truth.len().min(k);
    let idcg: f64 = (1..=ideal).map(|i| 1.0 / ((i + 1) as f64).log2()).sum();
    dcg / idcg
}

/// Macro-averaged NDCG@k.
pub fn ndcg_at_k<T: Eq + Hash>(ranked: &[Vec<T>], truth: &[Vec<T>], k: usize) -> f64 {
    assert_eq!(ranked.len(), truth.len(), "one ranking per truth set");
    assert!(!ranked.is_empty());
    let sum: f64 = ranked
        .iter()
        .zip(truth)
        .map(|(r, t)| ndcg_at_k_single(r, t, k))
        .sum();
    sum / ranked.len() as f64
}

/// Retrieval precision/recall at k. `p_at_k` divides by k regardless of how
/// many items were actually retrieved; `p_at_k_retrieved` divides by
/// min(k, retrieved) as the alternative convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PkRk {
    pub p_at_k: f64,
    pub r_at_k: f64,
    pub p_at_k_retrieved: f64,
}

pub fn pk_rk_per_query<T: Eq + Hash>(
    retrieved: &[Vec<T>],
    relevant: &[Vec<T>],
    k: usize,
) -> Vec<PkRk> {
    assert!(k >= 1, "k must be >= 1");
    assert_eq!(
        retrieved.len(),
        relevant.len(),
        "one retrieved list per relevance set"
    );
    retrieved
        .iter()
        .zip(relevant)
        .map(|(ret, rel)| {
            assert!(!rel.is_empty(), "relevance sets must be non-empty");
            let rel: HashSet<&T> = rel.iter().collect();
            let mut seen: HashSet<&T> = HashSet::new();
            let mut hits = 0usize;
            let mut taken = 0usize;
            for item in ret {
                if !seen.insert(item) {
                    continue;
                }
                taken += 1;
                if taken > k {
                    taken = k;
                    break;
                }
                if rel.contains(item) {
                    hits += 1;
                }
            }
            PkRk {
                p_at_k: hits as f64 / k as f64,
                r_at_k: hits as f64 / rel.len() as f64,
                p_at_k_retrieved: if taken == 0 {
                    0.0
                } else {
                    hits as f64 / taken as f64
                },
            }
        })
        .collect()
}

/// Macro-averaged retrieval metrics at k.
pub fn retrieval_pk_rk<T: Eq + Hash>(
    retrieved: &[Vec<T>],
    relevant: &[Vec<T>],
    k: usize,
) -> PkRk {
    let per = pk_rk_per_query(retrieved, relevant, k);
    let n = per.len() as f64;
    let mut acc = PkRk {
        p_at_k: 0.0,
        r_at_k: 0.0,
        p_at_k_retrieved: 0.0,
    };
    for q in &per {
        acc.p_at_k += q.p_at_k;
        acc.r_at_k += q.r_at_k;
        acc.p_at_k_retrieved += q.p_at_k_retrieved;
    }
    acc.p_at_k /= n;
    acc.r_at_k /= n;
    acc.p_at_k_retrieved /= n;
    acc
}

/// Serializable evaluation summary. Metric keys follow the fixed naming
/// "P", "R", "F1", "NDCG@k", "P@k", "R@k" with the numeric k inlined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub query_count: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_query: Option<Vec<BTreeMap<String, f64>>>,
}

impl EvalReport {
    pub fn new(task: &str, query_count: usize) -> Self {
        assert!(query_count > 0, "report needs at least one query");
        Self {
            task: task.to_string(),
            query_count,
            metrics: BTreeMap::new(),
            per_query: None,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        assert!(
            (0.0..=1.0).contains(&value),
            "metric out of [0,1]: {value}"
        );
        self.metrics.insert(name.into(), value);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, Box<dyn std::error::Error>> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
