//! Training loop: AdamW, warmup/decay schedule, task composition, run
//! directory persistence.
//!
//! One `run_training` call serves all four task kinds. Pre-training draws
//! fresh random views (substrings, masks) of the corpus every step;
//! fine-tuning iterates labeled examples. All randomness derives from the
//! single config seed, so a rerun with the same config and data reproduces
//! the loss trace bit for bit.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{
    apply_mlm_mask, make_classification_example, make_retrieval_example, AugmentError,
    MlmConfig, SampleMode, SamplerConfig,
};
use crate::corpus::{IntentExample, PretrainRecord, RetrievalPair};
use crate::encoder::{
    bind, encode_batch, init_encoder_params, mlm_logits, EncoderConfig, TokenBatch,
};
use crate::intent::{init_intent_head, intent_logits, multilabel_loss, rsc_loss};
use crate::numcore::{Graph, NodeId, ParamStore, Targets, Tensor};
use crate::retrieval::{embed_batch, in_batch_triplet_loss, init_two_tower_params, TwoTowerConfig};
use crate::tokenizer::{encode, encode_tokens, TokenSequence, Vocab};
use crate::trainer::checkpoint::{warm_start, Checkpoint, CheckpointError, TransferLog};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(&'static str),
    #[error("non-finite loss at step {step}; lower lr0 or check the data")]
    NonFiniteLoss { step: usize },
    #[error("non-finite gradient for {name} at step {step}")]
    NonFiniteGrad { name: String, step: usize },
    #[error("warm-start checkpoint was built over a different vocabulary")]
    VocabMismatch,
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    PretrainIntent,
    PretrainRetrieval,
    FinetuneIntent,
    FinetuneRetrieval,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::PretrainIntent => "pretrain-intent",
            TaskKind::PretrainRetrieval => "pretrain-retrieval",
            TaskKind::FinetuneIntent => "finetune-intent",
            TaskKind::FinetuneRetrieval => "finetune-retrieval",
        }
    }

    pub fn is_pretrain(self) -> bool {
        matches!(self, TaskKind::PretrainIntent | TaskKind::PretrainRetrieval)
    }

    pub fn is_intent(self) -> bool {
        matches!(self, TaskKind::PretrainIntent | TaskKind::FinetuneIntent)
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pretrain-intent" => Ok(TaskKind::PretrainIntent),
            "pretrain-retrieval" => Ok(TaskKind::PretrainRetrieval),
            "finetune-intent" => Ok(TaskKind::FinetuneIntent),
            "finetune-retrieval" => Ok(TaskKind::FinetuneRetrieval),
            other => Err(format!(
                "unknown task {other:?}; expected pretrain-intent, \
                 pretrain-retrieval, finetune-intent or finetune-retrieval"
            )),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which pre-training objectives a run combines. Empty for fine-tuning.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainTasks {
    pub rsc: bool,
    pub fsc: bool,
    pub rsr: bool,
    pub mlm: bool,
}

impl PretrainTasks {
    pub fn none(self) -> bool {
        !(self.rsc || self.fsc || self.rsr || self.mlm)
    }

    /// Canonical label recorded in run metadata, e.g. "RSC+MLM".
    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.rsc {
            parts.push("RSC");
        }
        if self.fsc {
            parts.push("FSC");
        }
        if self.rsr {
            parts.push("RSR");
        }
        if self.mlm {
            parts.push("MLM");
        }
        if parts.is_empty() {
            "No pre-train".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl FromStr for PretrainTasks {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let mut t = PretrainTasks::default();
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(t);
        }
        for part in s.split(',') {
            match part.trim().to_ascii_lowercase().as_str() {
                "rsc" => t.rsc = true,
                "fsc" => t.fsc = true,
                "rsr" => t.rsr = true,
                "mlm" => t.mlm = true,
                other => return Err(format!("unknown pre-training task {other:?}")),
            }
        }
        Ok(t)
    }
}

impl fmt::Display for PretrainTasks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.none() {
            return f.write_str("none");
        }
        let mut parts = Vec::new();
        if self.rsc {
            parts.push("rsc");
        }
        if self.fsc {
            parts.push("fsc");
        }
        if self.rsr {
            parts.push("rsr");
        }
        if self.mlm {
            parts.push("mlm");
        }
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub tasks: PretrainTasks,
    pub lr0: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Weight of the MLM term when combined with a main task in one loss.
    pub mlm_loss_weight: f32,
    /// Run MLM for the first half of the steps, the main task for the
    /// second half, instead of summing both each step.
    pub sequential_phases: bool,
    pub log_interval: usize,
    pub temperature: f32,
    pub margin: f32,
    pub max_substring_len: usize,
    pub mask_substring_in_title: bool,
    pub mask_ratio: f64,
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_title_len: usize,
    pub max_query_len: usize,
    pub dropout: f32,
    pub share_weights: bool,
    pub normalize: bool,
}

impl TrainConfig {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            tasks: PretrainTasks::default(),
            lr0: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            steps: 300,
            warmup_steps: 30,
            seed: 0,
            mlm_loss_weight: 1.0,
            sequential_phases: false,
            log_interval: 25,
            temperature: 1.0 / 3.0,
            margin: 0.1,
            max_substring_len: 5,
            mask_substring_in_title: false,
            mask_ratio: 0.15,
            dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            max_title_len: 64,
            max_query_len: 32,
            dropout: 0.1,
            share_weights: false,
            normalize: false,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            dim: self.dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_title_len.max(self.max_query_len),
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return err("steps must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return err(format!(
                "warmup_steps ({}) must be below steps ({})",
                self.warmup_steps, self.steps
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return err("lr0 must be a positive finite number".into());
        }
        if self.weight_decay < 0.0 {
            return err("weight_decay must be non-negative".into());
        }
        if !(self.temperature > 0.0) {
            return err("temperature must be positive".into());
        }
        if self.max_substring_len == 0 {
            return err("max_substring_len must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return err("mask_ratio must lie in [0, 1]".into());
        }
        match self.task {
            TaskKind::PretrainIntent => {
                if self.tasks.rsr {
                    return err("rsr is a retrieval task; use pretrain-retrieval".into());
                }
                if self.tasks.rsc && self.tasks.fsc {
                    return err("rsc and fsc are alternative views; pick one".into());
                }
                if self.tasks.none() {
                    return err("pretrain-intent needs at least one of rsc, fsc, mlm".into());
                }
            }
            TaskKind::PretrainRetrieval => {
                if self.tasks.rsc || self.tasks.fsc {
                    return err("rsc/fsc are intent tasks; use pretrain-intent".into());
                }
                if self.tasks.none() {
                    return err("pretrain-retrieval needs at least one of rsr, mlm".into());
                }
            }
            TaskKind::FinetuneIntent | TaskKind::FinetuneRetrieval => {
                if !self.tasks.none() {
                    return err("pre-training tasks do not apply to fine-tuning runs".into());
                }
            }
        }
        if self.sequential_phases && !self.tasks.mlm {
            return err("sequential_phases requires mlm in the task set".into());
        }
        Ok(())
    }

    /// Serializes as the flat `key = value` config-file format.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("task", self.task.to_string());
        push("tasks", self.tasks.to_string());
        push("lr0", self.lr0.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push("batch_size", self.batch_size.to_string());
        push("steps", self.steps.to_string());
        push("warmup_steps", self.warmup_steps.to_string());
        push("seed", self.seed.to_string());
        push("mlm_loss_weight", self.mlm_loss_weight.to_string());
        push("sequential_phases", self.sequential_phases.to_string());
        push("log_interval", self.log_interval.to_string());
        push("temperature", self.temperature.to_string());
        push("margin", self.margin.to_string());
        push("max_substring_len", self.max_substring_len.to_string());
        push(
            "mask_substring_in_title",
            self.mask_substring_in_title.to_string(),
        );
        push("mask_ratio", self.mask_ratio.to_string());
        push("dim", self.dim.to_string());
        push("num_layers", self.num_layers.to_string());
        push("num_heads", self.num_heads.to_string());
        push("ffn_dim", self.ffn_dim.to_string());
        push("max_title_len", self.max_title_len.to_string());
        push("max_query_len", self.max_query_len.to_string());
        push("dropout", self.dropout.to_string());
        push("share_weights", self.share_weights.to_string());
        push("normalize", self.normalize.to_string());
        s
    }

    /// Parses the flat config-file format; unknown keys are errors.
    /// Lines starting with `#` and blank lines are skipped.
    pub fn from_config_str(text: &str) -> Result<Self, TrainError> {
        let mut task = None;
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(TrainError::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                )));
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k == "task" {
                task = Some(TaskKind::from_str(&v).map_err(TrainError::Config)?);
            } else {
                pairs.push((lineno + 1, k, v));
            }
        }
        let Some(task) = task else {
            return Err(TrainError::Config("missing required key `task`".into()));
        };
        let mut cfg = TrainConfig::new(task);
        for (lineno, k, v) in pairs {
            cfg.set_key(&k, &v)
                .map_err(|e| TrainError::Config(format!("line {lineno}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn from_config_file(path: &Path) -> Result<Self, TrainError> {
        Self::from_config_str(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key = value` override. Used by both the config parser
    /// and command-line `--set key=value` flags.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse()
                .map_err(|e| format!("bad value {v:?} for {key}: {e}"))
        }
        match key {
            "task" => self.task = TaskKind::from_str(value)?,
            "tasks" => self.tasks = PretrainTasks::from_str(value)?,
            "lr0" => self.lr0 = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mlm_loss_weight" => self.mlm_loss_weight = num(key, value)?,
            "sequential_phases" => self.sequential_phases = num(key, value)?,
            "log_interval" => self.log_interval = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "max_substring_len" => self.max_substring_len = num(key, value)?,
            "mask_substring_in_title" => self.mask_substring_in_title = num(key, value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "num_layers" => self.num_layers = num(key, value)?,
            "num_heads" => self.num_heads = num(key, value)?,
            "ffn_dim" => self.ffn_dim = num(key, value)?,
            "max_title_len" => self.max_title_len = num(key, value)?,
            "max_query_len" => self.max_query_len = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "share_weights" => self.share_weights = num(key, value)?,
            "normalize" => self.normalize = num(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }
}

/// Learning rate at a given step: linear warmup from 0 to `lr0` over
/// `warmup_steps`, then linear decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f32 {
    if step >= cfg.steps {
        return 0.0;
    }
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.lr0 * step as f32 / cfg.warmup_steps as f32;
    }
    cfg.lr0 * (cfg.steps - step) as f32 / (cfg.steps - cfg.warmup_steps) as f32
}

/// First and second moment estimates, keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
}

/// One AdamW update with bias correction. Weight decay is decoupled and
/// applies to every parameter: theta -= lr * wd * theta_old, on top of the
/// moment-driven step. Parameters without a gradient entry decay only.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    step: usize,
    lr: f32,
    weight_decay: f32,
) -> Result<(), TrainError> {
    debug_assert!(step >= 1, "AdamW step index is 1-based");
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    let zero = Tensor::zeros(0, 0);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).unwrap_or(&zero);
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGrad {
                name: name.clone(),
                step,
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        let gd = g.data();
        for i in 0..pd.len() {
            let gi = if gd.is_empty() { 0.0 } else { gd[i] as f64 };
            let mi = BETA1 * md[i] as f64 + (1.0 - BETA1) * gi;
            let vi = BETA2 * vd[i] as f64 + (1.0 - BETA2) * gi * gi;
            md[i] = mi as f32;
            vd[i] = vi as f32;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            let theta = pd[i] as f64;
            pd[i] = (theta - lr as f64 * (update + weight_decay as f64 * theta)) as f32;
        }
    }
    Ok(())
}

/// Inputs for one training run. Only the slice matching `cfg.task` is read;
/// the rest may stay empty.
pub struct RunData<'a> {
    pub vocab: &'a Vocab,
    pub pretrain: &'a [PretrainRecord],
    pub intent: &'a [IntentExample],
    pub pairs: &'a [RetrievalPair],
    /// Label-space size for intent tasks (classification head width).
    pub num_labels: usize,
    pub label_map_sha256: Option<String>,
    pub warm_start: Option<&'a Checkpoint>,
    /// Content hashes of the input files, recorded in run metadata.
    pub input_sha256: BTreeMap<String, String>,
}

impl<'a> RunData<'a> {
    pub fn new(vocab: &'a Vocab) -> Self {
        Self {
            vocab,
            pretrain: &[],
            intent: &[],
            pairs: &[],
            num_labels: 0,
            label_map_sha256: None,
            warm_start: None,
            input_sha256: BTreeMap::new(),
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub params: ParamStore,
    /// (step, loss) for every optimizer step.
    pub trace: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub transfer: Option<TransferLog>,
    pub checkpoint: Checkpoint,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    task: &'a str,
    tasks_label: String,
    seed: u64,
    steps: usize,
    batch_size: usize,
    model_shape: String,
    param_count: usize,
    final_loss: f64,
    elapsed_sec: f64,
    vocab_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_map_sha256: Option<&'a String>,
    input_sha256: &'a BTreeMap<String, String>,
    warm_start_copied: Vec<String>,
    warm_start_fresh: Vec<String>,
}

fn sub_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over seed + salt; decorrelates derived streams
    let mut z = seed
        .wrapping_add(salt)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_batch<R: Rng>(
    perm: &mut Vec<usize>,
    cursor: &mut usize,
    batch: usize,
    rng: &mut R,
) -> Vec<usize> {
    let b = batch.min(perm.len());
    if *cursor + b > perm.len() {
        perm.shuffle(rng);
        *cursor = 0;
    }
    let out = perm[*cursor..*cursor + b].to_vec();
    *cursor += b;
    out
}

fn pack_sequences(seqs: &[TokenSequence]) -> TokenBatch {
    TokenBatch::pack(seqs)
}

/// Masked-LM loss over the titles of `records`, run through the encoder
/// bound under `prefix`.
fn mlm_loss_for_titles(
    g: &mut Graph,
    enc_cfg: &EncoderConfig,
    params: &crate::encoder::BoundParams,
    prefix: &str,
    vocab: &Vocab,
    mlm_cfg: &MlmConfig,
    titles: &[&str],
    max_title_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TrainError> {
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(titles.len());
    let mut positions: Vec<(usize, usize)> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (row, title) in titles.iter().enumerate() {
        let seq = encode(title, vocab, max_title_len);
        let masked = apply_mlm_mask(&seq, mlm_cfg, vocab, rng)?;
        for (&pos, &label) in masked.positions.iter().zip(&masked.labels) {
            positions.push((row, pos));
            labels.push(label);
        }
        rows.push(masked.input_ids);
    }
    let batch = TokenBatch::pack_ids(&rows);
    let hidden = encode_batch(g, enc_cfg, params, prefix, &batch);
    let logits = mlm_logits(g, params, prefix, hidden, &batch, &positions);
    Ok(g.softmax_cross_entropy(logits, Targets::Classes(std::sync::Arc::new(labels))))
}

struct StepPlan {
    use_task: bool,
    use_mlm: bool,
}

fn plan_step(cfg: &TrainConfig, step: usize) -> StepPlan {
    let has_mlm = cfg.tasks.mlm;
    let has_task = match cfg.task {
        TaskKind::PretrainIntent => cfg.tasks.rsc || cfg.tasks.fsc,
        TaskKind::PretrainRetrieval => cfg.tasks.rsr,
        TaskKind::FinetuneIntent | TaskKind::FinetuneRetrieval => true,
    };
    if cfg.sequential_phases && has_mlm && has_task {
        // MLM phase first, then the main task
        if step <= cfg.steps / 2 {
            StepPlan {
                use_task: false,
                use_mlm: true,
            }
        } else {
            StepPlan {
                use_task: true,
                use_mlm: false,
            }
        }
    } else {
        StepPlan {
            use_task: has_task,
            use_mlm: has_mlm,
        }
    }
}

pub fn run_training(
    cfg: &TrainConfig,
    data: &RunData,
    run_dir: Option<&Path>,
) -> Result<RunOutput, TrainError> {
    cfg.validate()?;
    let vocab = data.vocab;
    let enc_cfg = cfg.encoder_config(vocab.len());
    enc_cfg.validate();

    let n = match cfg.task {
        TaskKind::PretrainIntent | TaskKind::PretrainRetrieval => data.pretrain.len(),
        TaskKind::FinetuneIntent => data.intent.len(),
        TaskKind::FinetuneRetrieval => data.pairs.len(),
    };
    if n == 0 {
        return Err(TrainError::MissingInput(match cfg.task {
            TaskKind::PretrainIntent | TaskKind::PretrainRetrieval => {
                "pre-training records (title<TAB>category)"
            }
            TaskKind::FinetuneIntent => "intent fine-tuning examples",
            TaskKind::FinetuneRetrieval => "retrieval fine-tuning pairs",
        }));
    }
    let retrieval_task = !cfg.task.is_intent();
    if retrieval_task && n.min(cfg.batch_size) < 2 {
        return Err(TrainError::Config(
            "in-batch negatives need an effective batch of at least 2".into(),
        ));
    }
    let needs_head = match cfg.task {
        TaskKind::PretrainIntent => cfg.tasks.rsc || cfg.tasks.fsc,
        TaskKind::FinetuneIntent => true,
        _ => false,
    };
    if needs_head && data.num_labels == 0 {
        return Err(TrainError::MissingInput(
            "label space size (num_labels) for the classification head",
        ));
    }

    // Parameter stores. Intent runs use unprefixed names; retrieval runs the
    // tower prefixes, so warm starts can bridge the two layouts by name.
    let tt_cfg = TwoTowerConfig {
        encoder: enc_cfg.clone(),
        share_weights: cfg.share_weights,
        normalize: cfg.normalize,
        margin: cfg.margin,
    };
    let mut store: ParamStore = if retrieval_task {
        tt_cfg.validate();
        init_two_tower_params(&tt_cfg, cfg.seed)
    } else {
        let mut s = init_encoder_params(&enc_cfg, cfg.seed, "");
        if needs_head {
            init_intent_head(&mut s, cfg.dim, data.num_labels, sub_seed(cfg.seed, 5), "");
        }
        s
    };

    let transfer = match data.warm_start {
        Some(src) => {
            if src.vocab_sha256 != vocab.checksum() {
                return Err(TrainError::VocabMismatch);
            }
            // Heads transfer only over an identical label space.
            let heads_match = match (&src.label_map_sha256, &data.label_map_sha256) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            };
            let log = warm_start(&mut store, &src.params, |name| {
                !heads_match && (name.ends_with("head_w") || name.ends_with("head_b"))
            });
            log::info!(
                "warm start: copied {} tensors, {} fresh",
                log.copied.len(),
                log.fresh.len()
            );
            Some(log)
        }
        None => None,
    };

    let mut rng_shuffle = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1));
    let mut rng_sample = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2));
    let mut rng_mlm = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3));

    let sampler = SamplerConfig {
        max_substring_len: cfg.max_substring_len,
        mode: if cfg.tasks.fsc {
            SampleMode::Full
        } else {
            SampleMode::Substring
        },
        mask_substring_in_title: cfg.mask_substring_in_title,
        seed: cfg.seed,
    };
    let mlm_cfg = MlmConfig {
        mask_ratio: cfg.mask_ratio,
        seed: cfg.seed,
        ..MlmConfig::default()
    };
    mlm_cfg.validate();

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_shuffle);
    let mut cursor = 0usize;

    let started = Instant::now();
    let mut trace: Vec<(usize, f64)> = Vec::with_capacity(cfg.steps);
    let mut state = AdamState::default();

    for step in 1..=cfg.steps {
        let plan = plan_step(cfg, step);
        let idx = draw_batch(&mut perm, &mut cursor, cfg.batch_size, &mut rng_shuffle);

        let mut g = Graph::train(sub_seed(cfg.seed, 4).wrapping_add(step as u64));
        let params = bind(&mut g, &store);
        let mut parts: Vec<NodeId> = Vec::new();

        match cfg.task {
            TaskKind::PretrainIntent => {
                if plan.use_task {
                    let mut seqs = Vec::with_capacity(idx.len());
                    let mut cats = Vec::with_capacity(idx.len());
                    for &i in &idx {
                        let ex =
                            make_classification_example(&data.pretrain[i], &sampler, &mut rng_sample)?;
                        seqs.push(encode_tokens(&ex.query_tokens, vocab, cfg.max_query_len));
                        cats.push(ex.category_id);
                    }
                    let batch = pack_sequences(&seqs);
                    let logits = intent_logits(&mut g, &enc_cfg, &params, "", &batch);
                    parts.push(rsc_loss(&mut g, logits, &cats));
                }
                if plan.use_mlm {
                    let titles: Vec<&str> =
                        idx.iter().map(|&i| data.pretrain[i].title.as_str()).collect();
                    let mlm = mlm_loss_for_titles(
                        &mut g,
                        &enc_cfg,
                        &params,
                        "",
                        vocab,
                        &mlm_cfg,
                        &titles,
                        cfg.max_title_len,
                        &mut rng_mlm,
                    )?;
                    parts.push(weighted(&mut g, mlm, cfg, plan.use_task));
                }
            }
            TaskKind::FinetuneIntent => {
                let mut seqs = Vec::with_capacity(idx.len());
                let mut labels = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let ex = &data.intent[i];
                    seqs.push(encode(&ex.query, vocab, cfg.max_query_len));
                    labels.push(ex.labels.clone());
                }
                let batch = pack_sequences(&seqs);
                let logits = intent_logits(&mut g, &enc_cfg, &params, "", &batch);
                parts.push(multilabel_loss(&mut g, logits, &labels, cfg.temperature));
            }
            TaskKind::PretrainRetrieval => {
                if plan.use_task {
                    let mut q_seqs = Vec::with_capacity(idx.len());
                    let mut s_seqs = Vec::with_capacity(idx.len());
                    for &i in &idx {
                        let ex =
                            make_retrieval_example(&data.pretrain[i], &sampler, &mut rng_sample)?;
                        q_seqs.push(encode_tokens(&ex.query_tokens, vocab, cfg.max_query_len));
                        s_seqs.push(encode_tokens(&ex.title_tokens, vocab, cfg.max_title_len));
                    }
                    let qb = pack_sequences(&q_seqs);
                    let sb = pack_sequences(&s_seqs);
                    let qe = embed_batch(&mut g, &tt_cfg, &params, tt_cfg.query_prefix(), &qb);
                    let se = embed_batch(&mut g, &tt_cfg, &params, tt_cfg.item_prefix(), &sb);
                    parts.push(in_batch_triplet_loss(&mut g, qe, se, cfg.margin));
                }
                if plan.use_mlm {
                    // MLM runs through the item tower: titles are its input.
                    let titles: Vec<&str> =
                        idx.iter().map(|&i| data.pretrain[i].title.as_str()).collect();
                    let mlm = mlm_loss_for_titles(
                        &mut g,
                        &enc_cfg,
                        &params,
                        tt_cfg.item_prefix(),
                        vocab,
                        &mlm_cfg,
                        &titles,
                        cfg.max_title_len,
                        &mut rng_mlm,
                    )?;
                    parts.push(weighted(&mut g, mlm, cfg, plan.use_task));
                }
            }
            TaskKind::FinetuneRetrieval => {
                let mut q_seqs = Vec::with_capacity(idx.len());
                let mut s_seqs = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let pair = &data.pairs[i];
                    q_seqs.push(encode(&pair.query, vocab, cfg.max_query_len));
                    s_seqs.push(encode(&pair.title, vocab, cfg.max_title_len));
                }
                let qb = pack_sequences(&q_seqs);
                let sb = pack_sequences(&s_seqs);
                let qe = embed_batch(&mut g, &tt_cfg, &params, tt_cfg.query_prefix(), &qb);
                let se = embed_batch(&mut g, &tt_cfg, &params, tt_cfg.item_prefix(), &sb);
                parts.push(in_batch_triplet_loss(&mut g, qe, se, cfg.margin));
            }
        }

        let total = parts[0];
        let total = parts[1..].iter().fold(total, |acc, &p| g.add(acc, p));
        let loss = g.value(total).item() as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }

        g.backward(total);
        let mut grads = ParamStore::new();
        for (name, &id) in &params {
            if let Some(grad) = g.grad(id) {
                grads.insert(name.clone(), grad.clone());
            }
        }
        let lr = lr_at(step, cfg);
        adamw_step(&mut store, &grads, &mut state, step, lr, cfg.weight_decay)?;

        trace.push((step, loss));
        if cfg.log_interval > 0 && (step % cfg.log_interval == 0 || step == cfg.steps) {
            log::info!("step {step}/{} loss {loss:.6} lr {lr:.3e}", cfg.steps);
        }
    }

    let final_loss = trace.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
    let snapshot = serde_json::json!({
        "train": cfg,
        "tasks_label": cfg.tasks.label(),
        "num_labels": data.num_labels,
        "vocab_size": vocab.len(),
    });
    let ckpt = Checkpoint {
        step: cfg.steps as u64,
        config: snapshot,
        vocab_sha256: vocab.checksum(),
        label_map_sha256: data.label_map_sha256.clone(),
        params: store.clone(),
        opt_m: state.m,
        opt_v: state.v,
    };

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.to_config_string())?;
        let mut tsv = String::from("step\tloss\n");
        for &(s, l) in &trace {
            tsv.push_str(&format!("{s}\t{l}\n"));
        }
        std::fs::write(dir.join("loss_trace.tsv"), tsv)?;
        ckpt.save(dir)?;
        let meta = RunMeta {
            task: cfg.task.as_str(),
            tasks_label: cfg.tasks.label(),
            seed: cfg.seed,
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            model_shape: format!("{}x{}", cfg.num_layers, cfg.dim),
            param_count: crate::numcore::param_count(&store),
            final_loss,
            elapsed_sec: started.elapsed().as_secs_f64(),
            vocab_sha256: vocab.checksum(),
            label_map_sha256: data.label_map_sha256.as_ref(),
            input_sha256: &data.input_sha256,
            warm_start_copied: transfer.as_ref().map(|t| t.copied.clone()).unwrap_or_default(),
            warm_start_fresh: transfer.as_ref().map(|t| t.fresh.clone()).unwrap_or_default(),
        };
        std::fs::write(
            dir.join("run_meta.json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
    }

    Ok(RunOutput {
        params: store,
        trace,
        final_loss,
        transfer,
        checkpoint: ckpt,
    })
}

/// MLM term weight: scaled when summed with a main task, unscaled when it
/// is the only objective of the step.
fn weighted(g: &mut Graph, mlm: NodeId, cfg: &TrainConfig, with_task: bool) -> NodeId {
    if with_task && cfg.mlm_loss_weight != 1.0 {
        g.scale(mlm, cfg.mlm_loss_weight)
    } else {
        mlm
    }
}
