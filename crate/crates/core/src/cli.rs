//! Command-line interface. Data goes to stdout, logs and errors to stderr;
//! exit code 0 on success, 1 on failure, 2 on usage errors.

use std::collections::BTreeMap;
use std::error::Error;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::augment::{
    apply_mlm_mask, make_classification_example, make_retrieval_example, MlmConfig, SampleMode,
    SamplerConfig,
};
use crate::corpus::{
    load_intent, load_intent_eval, load_items, load_pretrain, load_retrieval,
    load_retrieval_eval, ItemsSchema, LabelMap, ParseMode, PretrainSchema, RetrievalSchema,
};
use crate::encoder::{bind, TokenBatch};
use crate::intent::{
    distribution_from_logits, intent_logits, predict_categories, IntentFinetuneConfig,
    PredictionMode,
};
use crate::metrics::{ndcg_at_k, retrieval_pk_rk, set_prf1, EvalReport};
use crate::numcore::{Graph, ParamStore};
use crate::retrieval::{embed_texts, ItemIndex, TwoTowerConfig};
use crate::tokenizer::{self, decode, Vocab};
use crate::trainer::checkpoint::{store_sha256, Checkpoint};
use crate::trainer::{run_training, RunData, TrainConfig};

type CliResult<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(
    name = "ecsearch",
    version,
    about = "Pre-training and retrieval toolkit for product-search models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from corpus titles
    BuildVocab(BuildVocabArgs),
    /// Print sampled training views (substrings, masked sequences)
    Sample(SampleArgs),
    /// Run a pre-training task set over the title corpus
    Pretrain(TrainArgs),
    /// Fine-tune on labeled queries or query-item pairs
    Finetune(TrainArgs),
    /// Evaluate intent classification (P/R/F1)
    EvalIntent(EvalIntentArgs),
    /// Evaluate embedding retrieval (NDCG@k, P@k, R@k)
    EvalRetrieval(EvalRetrievalArgs),
    /// Embed texts with one tower of a trained model
    Embed(EmbedArgs),
    /// Build a searchable item-embedding index
    Index(IndexArgs),
    /// Query an item index by text
    Search(SearchArgs),
    /// Consolidate evaluation reports into one table
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    /// title<TAB>category rows
    Pretrain,
    /// item_id<TAB>title<TAB>category rows
    Items,
    /// one text per line
    Lines,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Tower {
    Query,
    Item,
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Corpus files; repeatable
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "pretrain")]
    format: InputFormat,
    /// Drop tokens seen fewer times than this
    #[arg(long, default_value_t = 1)]
    min_freq: u64,
    #[arg(long)]
    output: PathBuf,
    /// Fail on malformed rows instead of skipping them
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// Pre-training corpus (title<TAB>category)
    #[arg(long)]
    pretrain: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// One of: rsc, fsc, rsr, mlm
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    max_substring_len: usize,
    #[arg(long)]
    mask_substring_in_title: bool,
    #[arg(long, default_value_t = 0.15)]
    mask_ratio: f64,
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` training config
    #[arg(long)]
    config: PathBuf,
    /// Pre-training corpus (pretrain runs)
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// Labeled data (fine-tuning runs): query<TAB>cat:weight,... or
    /// query<TAB>item_id<TAB>title
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// Existing label map to pin category ids (default: built from data)
    #[arg(long)]
    label_map: Option<PathBuf>,
    /// Warm-start from this run directory's checkpoint
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    run_dir: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Config overrides, e.g. --set steps=500; repeatable
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct EvalIntentArgs {
    /// Run directory holding checkpoint.json/.bin
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Label map the checkpoint's head was trained over
    #[arg(long)]
    label_map: PathBuf,
    /// Eval rows: query<TAB>cat1,cat2,...
    #[arg(long)]
    eval: PathBuf,
    /// Predict the top-k categories
    #[arg(long, conflicts_with = "threshold")]
    k: Option<usize>,
    /// Predict every category with probability >= threshold
    #[arg(long)]
    threshold: Option<f32>,
    /// Write the full report as JSON here
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct EvalRetrievalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Catalog rows: item_id<TAB>title<TAB>category
    #[arg(long)]
    items: PathBuf,
    /// Eval rows: query<TAB>item_id1,item_id2,...
    #[arg(long)]
    eval: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Texts to embed
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "lines")]
    format: InputFormat,
    #[arg(long, value_enum)]
    tower: Tower,
    /// Write raw little-endian f32 rows here instead of TSV on stdout
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    items: PathBuf,
    /// Index base path; writes {base}.json, {base}.f32, {base}.ids
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Index base path written by `index`
    #[arg(long)]
    index: PathBuf,
    /// Single query text
    #[arg(long, conflicts_with = "queries")]
    query: Option<String>,
    /// File with one query per line
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation report JSON files
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

/// Parses argv and runs one command. Returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Pretrain(a) => cmd_train(a, true),
        Command::Finetune(a) => cmd_train(a, false),
        Command::EvalIntent(a) => cmd_eval_intent(a),
        Command::EvalRetrieval(a) => cmd_eval_retrieval(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Index(a) => cmd_index(a),
        Command::Search(a) => cmd_search(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn mode_of(strict: bool) -> ParseMode {
    if strict {
        ParseMode::Strict
    } else {
        ParseMode::Lenient
    }
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(tokenizer::hex(&Sha256::digest(std::fs::read(path)?)))
}

/// Texts from a corpus file in any of the accepted formats.
fn read_texts(path: &Path, format: InputFormat, mode: ParseMode) -> CliResult<Vec<String>> {
    Ok(match format {
        InputFormat::Pretrain => {
            let mut labels = LabelMap::default();
            let (records, stats) = load_pretrain(path, PretrainSchema::default(), mode, &mut labels)?;
            log::info!("{}: {stats}", path.display());
            records.into_iter().map(|r| r.title).collect()
        }
        InputFormat::Items => {
            let (items, stats) = load_items(path, ItemsSchema::default(), mode)?;
            log::info!("{}: {stats}", path.display());
            items.into_iter().map(|i| i.title).collect()
        }
        InputFormat::Lines => std::fs::read_to_string(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
    })
}

fn cmd_build_vocab(a: BuildVocabArgs) -> CliResult<()> {
    let mode = mode_of(a.strict);
    let mut texts = Vec::new();
    for path in &a.input {
        texts.extend(read_texts(path, a.format, mode)?);
    }
    let vocab = Vocab::build(texts.iter().map(String::as_str), a.min_freq)?;
    vocab.save(&a.output)?;
    println!("vocab_size\t{}", vocab.len());
    println!("checksum\t{}", vocab.checksum());
    println!("output\t{}", a.output.display());
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> CliResult<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let mut labels = LabelMap::default();
    let (records, _) = load_pretrain(
        &a.pretrain,
        PretrainSchema::default(),
        mode_of(a.strict),
        &mut labels,
    )?;
    if records.is_empty() {
        return Err("no usable records in the corpus".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let sampler = SamplerConfig {
        max_substring_len: a.max_substring_len,
        mode: if a.task == "fsc" {
            SampleMode::Full
        } else {
            SampleMode::Substring
        },
        mask_substring_in_title: a.mask_substring_in_title,
        seed: a.seed,
    };
    let mlm_cfg = MlmConfig {
        mask_ratio: a.mask_ratio,
        seed: a.seed,
        ..MlmConfig::default()
    };
    for _ in 0..a.count {
        let rec = &records[rng.random_range(0..records.len())];
        match a.task.as_str() {
            "rsc" | "fsc" => {
                let ex = make_classification_example(rec, &sampler, &mut rng)?;
                let raw = labels.raw(ex.category_id).unwrap_or("?");
                println!("{}\t{raw}", ex.query);
            }
            "rsr" => {
                let ex = make_retrieval_example(rec, &sampler, &mut rng)?;
                println!("{}\t{}", ex.query, tokenizer::join_tokens(&ex.title_tokens));
            }
            "mlm" => {
                let seq = tokenizer::encode(&rec.title, &vocab, rec.title.chars().count() + 2);
                let masked = apply_mlm_mask(&seq, &mlm_cfg, &vocab, &mut rng)?;
                let shown = decode(&masked.input_ids, &vocab)?;
                let positions: Vec<String> =
                    masked.positions.iter().map(|p| p.to_string()).collect();
                println!("{shown}\t{}\t{}", rec.title, positions.join(","));
            }
            other => return Err(format!("unknown sample task {other:?}").into()),
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, expect_pretrain: bool) -> CliResult<()> {
    let mut cfg = TrainConfig::from_config_file(&a.config)?;
    for kv in &a.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects key=value, got {kv:?}"))?;
        cfg.set_key(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if cfg.task.is_pretrain() != expect_pretrain {
        return Err(format!(
            "config task `{}` does not match this subcommand",
            cfg.task
        )
        .into());
    }
    let mode = mode_of(a.strict);
    let vocab = Vocab::load(&a.vocab)?;
    let mut data = RunData::new(&vocab);
    data.input_sha256
        .insert("vocab".into(), sha256_file(&a.vocab)?);

    let mut labels = match &a.label_map {
        Some(path) => LabelMap::load(path)?,
        None => LabelMap::default(),
    };

    // Borrow targets that must outlive `data`.
    let records;
    let intent_examples;
    let pairs;
    let warm;

    match cfg.task {
        crate::trainer::TaskKind::PretrainIntent | crate::trainer::TaskKind::PretrainRetrieval => {
            let path = a
                .pretrain
                .as_ref()
                .ok_or("--pretrain <corpus.tsv> is required for pre-training")?;
            let (r, stats) = load_pretrain(path, PretrainSchema::default(), mode, &mut labels)?;
            log::info!("{}: {stats}", path.display());
            records = r;
            data.pretrain = &records;
            data.input_sha256
                .insert("pretrain".into(), sha256_file(path)?);
        }
        crate::trainer::TaskKind::FinetuneIntent => {
            let path = a
                .train
                .as_ref()
                .ok_or("--train <intents.tsv> is required for fine-tuning")?;
            let (ex, stats) = load_intent(path, mode, &mut labels)?;
            log::info!("{}: {stats}", path.display());
            intent_examples = ex;
            data.intent = &intent_examples;
            data.input_sha256.insert("train".into(), sha256_file(path)?);
        }
        crate::trainer::TaskKind::FinetuneRetrieval => {
            let path = a
                .train
                .as_ref()
                .ok_or("--train <pairs.tsv> is required for fine-tuning")?;
            let (p, stats) = load_retrieval(path, RetrievalSchema::default(), mode)?;
            log::info!("{}: {stats}", path.display());
            pairs = p;
            data.pairs = &pairs;
            data.input_sha256.insert("train".into(), sha256_file(path)?);
        }
    }

    if cfg.task.is_intent() || cfg.task.is_pretrain() {
        if labels.len() > 0 {
            data.num_labels = labels.space().size;
            data.label_map_sha256 = Some(labels.checksum());
        }
    }
    if let Some(init) = &a.init {
        warm = Checkpoint::load(init)?;
        data.warm_start = Some(&warm);
    }

    let out = run_training(&cfg, &data, Some(&a.run_dir))?;
    if labels.len() > 0 {
        labels.save(&a.run_dir.join("label_map.tsv"))?;
    }
    println!("task\t{}", cfg.task);
    println!("tasks\t{}", cfg.tasks.label());
    println!("steps\t{}", cfg.steps);
    println!("final_loss\t{}", out.final_loss);
    println!("run_dir\t{}", a.run_dir.display());
    Ok(())
}

/// Rebuilds the training config a checkpoint was produced with.
fn snapshot_config(ckpt: &Checkpoint) -> CliResult<TrainConfig> {
    let v = ckpt
        .config
        .get("train")
        .ok_or("checkpoint config snapshot is missing the `train` section")?;
    Ok(serde_json::from_value(v.clone())?)
}

fn load_model(dir: &Path, vocab: &Vocab) -> CliResult<(Checkpoint, TrainConfig)> {
    let ckpt = Checkpoint::load(dir)?;
    if ckpt.vocab_sha256 != vocab.checksum() {
        return Err("vocabulary does not match the checkpoint".into());
    }
    let cfg = snapshot_config(&ckpt)?;
    Ok((ckpt, cfg))
}

/// Tower prefixes present in a parameter store: two-tower runs use
/// "q."/"s." (or shared "enc."), single-encoder runs bare names.
fn tower_prefixes(store: &ParamStore) -> (&'static str, &'static str) {
    if store.contains_key("q.tok_emb") {
        ("q.", "s.")
    } else if store.contains_key("enc.tok_emb") {
        ("enc.", "enc.")
    } else {
        ("", "")
    }
}

fn two_tower_of(cfg: &TrainConfig, vocab_size: usize) -> TwoTowerConfig {
    TwoTowerConfig {
        encoder: cfg.encoder_config(vocab_size),
        share_weights: cfg.share_weights,
        normalize: cfg.normalize,
        margin: cfg.margin,
    }
}

/// Intent predictions for queries, chunked through eval-mode graphs.
fn predict_intents(
    store: &ParamStore,
    cfg: &TrainConfig,
    vocab: &Vocab,
    queries: &[String],
    prediction: PredictionMode,
) -> Vec<Vec<usize>> {
    let enc_cfg = cfg.encoder_config(vocab.len());
    let pred_cfg = IntentFinetuneConfig {
        temperature: cfg.temperature,
        prediction,
    };
    let mut out = Vec::with_capacity(queries.len());
    for group in queries.chunks(64) {
        let seqs: Vec<_> = group
            .iter()
            .map(|q| tokenizer::encode(q, vocab, cfg.max_query_len))
            .collect();
        let batch = TokenBatch::pack(&seqs);
        let mut g = Graph::eval();
        let params = bind(&mut g, store);
        let logits = intent_logits(&mut g, &enc_cfg, &params, "", &batch);
        let value = g.value(logits);
        for r in 0..value.rows() {
            let dist = distribution_from_logits(value.row(r));
            out.push(predict_categories(&dist, &pred_cfg));
        }
    }
    out
}

fn cmd_eval_intent(a: EvalIntentArgs) -> CliResult<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let (ckpt, cfg) = load_model(&a.checkpoint, &vocab)?;
    let labels = LabelMap::load(&a.label_map)?;
    if let Some(expected) = &ckpt.label_map_sha256 {
        if *expected != labels.checksum() {
            return Err("label map does not match the checkpoint's label space".into());
        }
    }
    let (examples, stats) = load_intent_eval(&a.eval, mode_of(a.strict), &labels)?;
    log::info!("{}: {stats}", a.eval.display());
    if examples.is_empty() {
        return Err("no usable evaluation rows".into());
    }
    let prediction = match (a.k, a.threshold) {
        (_, Some(t)) => PredictionMode::Threshold(t),
        (Some(k), None) => PredictionMode::TopK(k),
        (None, None) => PredictionMode::TopK(1),
    };
    let queries: Vec<String> = examples.iter().map(|e| e.query.clone()).collect();
    let predicted = predict_intents(&ckpt.params, &cfg, &vocab, &queries, prediction);
    let truth: Vec<Vec<usize>> = examples.iter().map(|e| e.truth.clone()).collect();
    let (p, r, f1) = set_prf1(&predicted, &truth);

    let mut report = EvalReport::new("intent", examples.len());
    report.insert("P", p);
    report.insert("R", r);
    report.insert("F1", f1);
    for (name, value) in &report.metrics {
        println!("{name}\t{value:.6}");
    }
    if let Some(path) = &a.report {
        report.save(path)?;
        log::info!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_eval_retrieval(a: EvalRetrievalArgs) -> CliResult<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let (ckpt, cfg) = load_model(&a.checkpoint, &vocab)?;
    let mode = mode_of(a.strict);
    let (items, istats) = load_items(&a.items, ItemsSchema::default(), mode)?;
    log::info!("{}: {istats}", a.items.display());
    let (examples, estats) = load_retrieval_eval(&a.eval, mode)?;
    log::info!("{}: {estats}", a.eval.display());
    if examples.is_empty() {
        return Err("no usable evaluation rows".into());
    }
    let tt = two_tower_of(&cfg, vocab.len());
    let (q_prefix, s_prefix) = tower_prefixes(&ckpt.params);

    let titles: Vec<String> = items.iter().map(|i| i.title.clone()).collect();
    let ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
    let matrix = embed_texts(&tt, &ckpt.params, s_prefix, &titles, &vocab, 64);
    let index = ItemIndex::build(ids, matrix, cfg.normalize, store_sha256(&ckpt.params))?;

    let queries: Vec<String> = examples.iter().map(|e| e.query.clone()).collect();
    let q_emb = embed_texts(&tt, &ckpt.params, q_prefix, &queries, &vocab, 64);
    let mut retrieved: Vec<Vec<String>> = Vec::with_capacity(examples.len());
    for row in 0..q_emb.rows() {
        let hits = index.search_topk(q_emb.row(row), a.k);
        retrieved.push(hits.into_iter().map(|(id, _)| id).collect());
    }
    let relevant: Vec<Vec<String>> = examples.iter().map(|e| e.relevant.clone()).collect();

    let ndcg = ndcg_at_k(&retrieved, &relevant, a.k);
    let pkrk = retrieval_pk_rk(&retrieved, &relevant, a.k);
    let mut report = EvalReport::new("retrieval", examples.len());
    report.insert(format!("NDCG@{}", a.k), ndcg);
    report.insert(format!("P@{}", a.k), pkrk.p_at_k);
    report.insert(format!("R@{}", a.k), pkrk.r_at_k);
    for (name, value) in &report.metrics {
        println!("{name}\t{value:.6}");
    }
    if let Some(path) = &a.report {
        report.save(path)?;
        log::info!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> CliResult<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let (ckpt, cfg) = load_model(&a.checkpoint, &vocab)?;
    let texts = read_texts(&a.input, a.format, mode_of(a.strict))?;
    if texts.is_empty() {
        return Err("no texts to embed".into());
    }
    let tt = two_tower_of(&cfg, vocab.len());
    let (q_prefix, s_prefix) = tower_prefixes(&ckpt.params);
    let prefix = match a.tower {
        Tower::Query => q_prefix,
        Tower::Item => s_prefix,
    };
    let emb = embed_texts(&tt, &ckpt.params, prefix, &texts, &vocab, 64);
    match &a.output {
        Some(path) => {
            let mut bytes = Vec::with_capacity(emb.len() * 4);
            for v in emb.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            std::fs::write(path, bytes)?;
            println!("rows\t{}", emb.rows());
            println!("dim\t{}", emb.cols());
            println!("output\t{}", path.display());
        }
        None => {
            for r in 0..emb.rows() {
                let row: Vec<String> = emb.row(r).iter().map(|v| format!("{v:.6e}")).collect();
                println!("{}", row.join("\t"));
            }
        }
    }
    Ok(())
}

fn cmd_index(a: IndexArgs) -> CliResult<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let (ckpt, cfg) = load_model(&a.checkpoint, &vocab)?;
    let (items, stats) = load_items(&a.items, ItemsSchema::default(), mode_of(a.strict))?;
    log::info!("{}: {stats}", a.items.display());
    let tt = two_tower_of(&cfg, vocab.len());
    let (_, s_prefix) = tower_prefixes(&ckpt.params);
    let titles: Vec<String> = items.iter().map(|i| i.title.clone()).collect();
    let ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
    let matrix = embed_texts(&tt, &ckpt.params, s_prefix, &titles, &vocab, 64);
    let index = ItemIndex::build(ids, matrix, cfg.normalize, store_sha256(&ckpt.params))?;
    index.save(&a.output)?;
    println!("items\t{}", index.len());
    println!("dim\t{}", index.dim());
    println!("index\t{}", a.output.display());
    Ok(())
}

fn cmd_search(a: SearchArgs) -> CliResult<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let (ckpt, cfg) = load_model(&a.checkpoint, &vocab)?;
    let index = ItemIndex::load(&a.index)?;
    if index.model_checksum() != store_sha256(&ckpt.params) {
        return Err("index was built with a different model; rebuild it".into());
    }
    let queries: Vec<String> = match (&a.query, &a.queries) {
        (Some(q), None) => vec![q.clone()],
        (None, Some(path)) => std::fs::read_to_string(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        _ => return Err("provide exactly one of --query or --queries".into()),
    };
    if queries.is_empty() {
        return Err("no queries to search".into());
    }
    let tt = two_tower_of(&cfg, vocab.len());
    let (q_prefix, _) = tower_prefixes(&ckpt.params);
    let emb = embed_texts(&tt, &ckpt.params, q_prefix, &queries, &vocab, 64);
    for (row, query) in queries.iter().enumerate() {
        for (rank, (item_id, score)) in index.search_topk(emb.row(row), a.k).iter().enumerate() {
            println!("{query}\t{}\t{item_id}\t{score:.6}", rank + 1);
        }
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let mut reports = Vec::new();
    let mut metric_names: Vec<String> = Vec::new();
    for path in &a.reports {
        let report = EvalReport::load(path)?;
        for name in report.metrics.keys() {
            if !metric_names.contains(name) {
                metric_names.push(name.clone());
            }
        }
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        reports.push((label, report));
    }
    metric_names.sort();
    let mut header = vec!["report".to_string(), "task".to_string(), "queries".to_string()];
    header.extend(metric_names.iter().cloned());
    println!("{}", header.join("\t"));
    for (label, report) in &reports {
        let mut row = vec![
            label.clone(),
            report.task.clone(),
            report.query_count.to_string(),
        ];
        for name in &metric_names {
            row.push(
                report
                    .metrics
                    .get(name)
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_else(|| "-".to_string()),
            );
        }
        println!("{}", row.join("\t"));
    }
    Ok(())
}

/// Map of report label -> metrics, exposed for table-driven tests.
pub fn report_table(paths: &[PathBuf]) -> CliResult<BTreeMap<String, BTreeMap<String, f64>>> {
    let mut out = BTreeMap::new();
    for path in paths {
        let report = EvalReport::load(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        out.insert(label, report.metrics);
    }
    Ok(out)
}
