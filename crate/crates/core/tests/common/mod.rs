#![allow(dead_code)] // each test binary uses a different subset of helpers

//! Shared synthetic corpus for integration tests.
//!
//! Categories own disjoint pools of CJK codepoints plus a shared pool, so
//! category membership of any character is unambiguous. Fine-tuning queries
//! draw only from the first 15 pool characters of each category while
//! evaluation queries draw from all 40; the held-out characters are exactly
//! what pre-training over full titles can teach and task-only training
//! cannot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecsearch::corpus::{
    CatalogItem, IntentEvalExample, IntentExample, PretrainRecord, RetrievalEvalExample,
    RetrievalPair,
};
use ecsearch::encoder::{bind, TokenBatch};
use ecsearch::intent::{
    distribution_from_logits, intent_logits, predict_categories, IntentFinetuneConfig,
    PredictionMode,
};
use ecsearch::metrics::set_prf1;
use ecsearch::numcore::{Graph, ParamStore};
use ecsearch::retrieval::{embed_texts, ItemIndex, TwoTowerConfig};
use ecsearch::tokenizer::{encode, Vocab};
use ecsearch::trainer::TrainConfig;

pub const NUM_CATS: usize = 20;
pub const CAT_POOL: usize = 40;
pub const TRAIN_POOL: usize = 15;
pub const SHARED_POOL: usize = 100;

pub fn cat_char(cat: usize, j: usize) -> char {
    char::from_u32(0x4E00 + (cat * CAT_POOL + j) as u32).unwrap()
}

pub fn shared_char(j: usize) -> char {
    char::from_u32(0x7000 + j as u32).unwrap()
}

pub fn cat_name(cat: usize) -> String {
    format!("cat{cat:02}")
}

fn title_for<R: Rng>(cat: usize, rng: &mut R) -> String {
    let len = rng.random_range(8..=16);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < 0.8 {
                cat_char(cat, rng.random_range(0..CAT_POOL))
            } else {
                shared_char(rng.random_range(0..SHARED_POOL))
            }
        })
        .collect()
}

/// Query drawn from one category's exclusive characters in `lo..hi`.
fn query_for<R: Rng>(cat: usize, lo: usize, hi: usize, len: (usize, usize), rng: &mut R) -> String {
    let n = rng.random_range(len.0..=len.1);
    (0..n).map(|_| cat_char(cat, rng.random_range(lo..hi))).collect()
}

pub struct Synth {
    pub records: Vec<PretrainRecord>,
    pub catalog: Vec<CatalogItem>,
    pub intent_train: Vec<IntentExample>,
    pub intent_eval: Vec<IntentEvalExample>,
    pub pairs: Vec<RetrievalPair>,
    pub retrieval_eval: Vec<RetrievalEvalExample>,
    pub vocab: Vocab,
}

pub struct SynthSpec {
    pub titles: usize,
    pub intent_train: usize,
    pub intent_eval: usize,
    pub pairs: usize,
    pub retrieval_eval: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            titles: 5000,
            intent_train: 500,
            intent_eval: 400,
            pairs: 500,
            retrieval_eval: 300,
        }
    }
}

pub fn synth(seed: u64, spec: &SynthSpec) -> Synth {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut records = Vec::with_capacity(spec.titles);
    let mut catalog = Vec::with_capacity(spec.titles);
    for i in 0..spec.titles {
        let cat = i % NUM_CATS;
        let title = title_for(cat, &mut rng);
        records.push(PretrainRecord {
            title: title.clone(),
            category_id: cat,
        });
        catalog.push(CatalogItem {
            item_id: format!("i{i:05}"),
            title,
            category_raw: cat_name(cat),
        });
    }

    let intent_train = (0..spec.intent_train)
        .map(|i| {
            let cat = i % NUM_CATS;
            IntentExample {
                query: query_for(cat, 0, TRAIN_POOL, (2, 4), &mut rng),
                labels: vec![(cat, 1.0)],
            }
        })
        .collect();

    let intent_eval = (0..spec.intent_eval)
        .map(|i| {
            let cat = i % NUM_CATS;
            IntentEvalExample {
                query: query_for(cat, TRAIN_POOL, CAT_POOL, (2, 4), &mut rng),
                truth: vec![cat],
            }
        })
        .collect();

    // Fine-tuning pairs sample spans from the first half of a title; eval
    // queries from the second half. Ground truth for eval is containment:
    // every item whose title holds all query characters.
    let pairs = (0..spec.pairs)
        .map(|i| {
            let item = &catalog[i % catalog.len()];
            let chars: Vec<char> = item.title.chars().collect();
            let len = rng.random_range(2..=4);
            let hi = (chars.len() / 2).max(len);
            let start = rng.random_range(0..=hi - len);
            RetrievalPair {
                query: chars[start..start + len].iter().collect(),
                item_id: item.item_id.clone(),
                title: item.title.clone(),
            }
        })
        .collect();

    let title_chars: Vec<Vec<char>> = catalog.iter().map(|i| i.title.chars().collect()).collect();
    let mut retrieval_eval = Vec::with_capacity(spec.retrieval_eval);
    while retrieval_eval.len() < spec.retrieval_eval {
        let pick = rng.random_range(0..catalog.len());
        let chars = &title_chars[pick];
        let len = rng.random_range(3..=5);
        let lo = chars.len() / 2;
        if chars.len() < lo + len {
            continue;
        }
        let start = rng.random_range(lo..=chars.len() - len);
        let qchars = &chars[start..start + len];
        let relevant: Vec<String> = catalog
            .iter()
            .zip(&title_chars)
            .filter(|(_, t)| qchars.iter().all(|c| t.contains(c)))
            .map(|(it, _)| it.item_id.clone())
            .collect();
        if relevant.len() > 10 {
            continue;
        }
        retrieval_eval.push(RetrievalEvalExample {
            query: qchars.iter().collect(),
            relevant,
        });
    }

    let titles: Vec<&str> = records.iter().map(|r| r.title.as_str()).collect();
    let vocab = Vocab::build(titles.iter().copied(), 1).unwrap();

    Synth {
        records,
        catalog,
        intent_train,
        intent_eval,
        pairs,
        retrieval_eval,
        vocab,
    }
}

/// Top-1 intent prediction over eval queries; returns macro F1.
pub fn intent_f1(
    params: &ParamStore,
    cfg: &TrainConfig,
    vocab: &Vocab,
    eval: &[IntentEvalExample],
) -> f64 {
    let enc_cfg = cfg.encoder_config(vocab.len());
    let pred_cfg = IntentFinetuneConfig {
        temperature: cfg.temperature,
        prediction: PredictionMode::TopK(1),
    };
    let mut predicted = Vec::with_capacity(eval.len());
    for group in eval.chunks(64) {
        let seqs: Vec<_> = group
            .iter()
            .map(|e| encode(&e.query, vocab, cfg.max_query_len))
            .collect();
        let batch = TokenBatch::pack(&seqs);
        let mut g = Graph::eval();
        let bound = bind(&mut g, params);
        let logits = intent_logits(&mut g, &enc_cfg, &bound, "", &batch);
        let value = g.value(logits);
        for r in 0..value.rows() {
            let dist = distribution_from_logits(value.row(r));
            predicted.push(predict_categories(&dist, &pred_cfg));
        }
    }
    let truth: Vec<Vec<usize>> = eval.iter().map(|e| e.truth.clone()).collect();
    let (_, _, f1) = set_prf1(&predicted, &truth);
    f1
}

/// Macro recall@k of full-catalog search over the eval queries.
pub fn retrieval_recall_at(
    params: &ParamStore,
    cfg: &TrainConfig,
    vocab: &Vocab,
    catalog: &[CatalogItem],
    eval: &[RetrievalEvalExample],
    k: usize,
) -> f64 {
    let tt = TwoTowerConfig {
        encoder: cfg.encoder_config(vocab.len()),
        share_weights: cfg.share_weights,
        normalize: cfg.normalize,
        margin: cfg.margin,
    };
    let (qp, sp) = if params.contains_key("q.tok_emb") {
        ("q.", "s.")
    } else {
        ("enc.", "enc.")
    };
    let titles: Vec<String> = catalog.iter().map(|i| i.title.clone()).collect();
    let ids: Vec<String> = catalog.iter().map(|i| i.item_id.clone()).collect();
    let matrix = embed_texts(&tt, params, sp, &titles, vocab, 64);
    let index = ItemIndex::build(ids, matrix, cfg.normalize, "eval".into()).unwrap();
    let queries: Vec<String> = eval.iter().map(|e| e.query.clone()).collect();
    let q_emb = embed_texts(&tt, params, qp, &queries, vocab, 64);
    let mut recall_sum = 0.0;
    for (row, ex) in eval.iter().enumerate() {
        let hits = index.search_topk(q_emb.row(row), k);
        let got = hits
            .iter()
            .filter(|(id, _)| ex.relevant.contains(id))
            .count();
        recall_sum += got as f64 / ex.relevant.len() as f64;
    }
    recall_sum / eval.len() as f64
}

/// Paths of TSV fixtures written by `write_files`.
pub struct SynthFiles {
    pub pretrain: PathBuf,
    pub items: PathBuf,
    pub intent_train: PathBuf,
    pub intent_eval: PathBuf,
    pub pairs: PathBuf,
    pub retrieval_eval: PathBuf,
}

/// Writes the corpus in the on-disk TSV formats the CLI consumes.
pub fn write_files(s: &Synth, dir: &Path) -> std::io::Result<SynthFiles> {
    std::fs::create_dir_all(dir)?;
    let files = SynthFiles {
        pretrain: dir.join("pretrain.tsv"),
        items: dir.join("items.tsv"),
        intent_train: dir.join("intent_train.tsv"),
        intent_eval: dir.join("intent_eval.tsv"),
        pairs: dir.join("pairs.tsv"),
        retrieval_eval: dir.join("retrieval_eval.tsv"),
    };
    let mut out = String::new();
    for r in &s.records {
        out.push_str(&format!("{}\t{}\n", r.title, cat_name(r.category_id)));
    }
    std::fs::write(&files.pretrain, &out)?;

    out.clear();
    for i in &s.catalog {
        out.push_str(&format!("{}\t{}\t{}\n", i.item_id, i.title, i.category_raw));
    }
    std::fs::write(&files.items, &out)?;

    out.clear();
    for e in &s.intent_train {
        let labels: Vec<String> = e
            .labels
            .iter()
            .map(|&(id, w)| format!("{}:{w}", cat_name(id)))
            .collect();
        out.push_str(&format!("{}\t{}\n", e.query, labels.join(",")));
    }
    std::fs::write(&files.intent_train, &out)?;

    out.clear();
    for e in &s.intent_eval {
        let cats: Vec<String> = e.truth.iter().map(|&id| cat_name(id)).collect();
        out.push_str(&format!("{}\t{}\n", e.query, cats.join(",")));
    }
    std::fs::write(&files.intent_eval, &out)?;

    out.clear();
    for p in &s.pairs {
        out.push_str(&format!("{}\t{}\t{}\n", p.query, p.item_id, p.title));
    }
    std::fs::write(&files.pairs, &out)?;

    out.clear();
    for e in &s.retrieval_eval {
        out.push_str(&format!("{}\t{}\n", e.query, e.relevant.join(",")));
    }
    std::fs::write(&files.retrieval_eval, &out)?;
    Ok(files)
}

/// Label-name -> dense-id map the synthetic data was generated with, in the
/// order a first-appearance scan of the pretrain file produces.
pub fn label_ids() -> BTreeMap<String, usize> {
    (0..NUM_CATS).map(|c| (cat_name(c), c)).collect()
}
