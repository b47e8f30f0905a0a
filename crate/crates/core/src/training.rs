//! Pretraining and fine-tuning loops, grid search and seed aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{ClassificationRecord, EntityTypeSet, Level, NerSentence, PackedCorpus, Tag};
use crate::masking::{apply_dynamic_mask, row_rng, MaskedBatch, MaskingError, MaskingPolicy, MaskingVocab, IGNORE};
use crate::metrics::{score_classification, score_ner, ClsReport, MetricsError, NerReport};
use crate::model::{EncoderInput, Model, ModelError};
use crate::textnorm::{normalize, NormConfig};
use crate::tokenizer::{TokenId, TokenizerModel};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corpus was packed with tokenizer {found}, model expects {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("non-finite loss at step {step} (batch {batch_fingerprint})")]
    NonFiniteLoss { step: usize, batch_fingerprint: String },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("aggregation needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("runs disagree on configuration: {0}")]
    MismatchedConfigs(String),
    #[error("unknown task {0:?}; expected ner, volume, chapter or subject")]
    UnknownTask(String),
    #[error("unknown preset {0:?}; expected v1, v2 or bert-style")]
    UnknownPreset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

// ---------------------------------------------------------------------------
// Optimizer

/// AdamW settings shared by pretraining and fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay
/// to 0 at `total`. `step` counts from 0.
pub fn learning_rate(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total > warmup {
        peak * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
    } else {
        peak
    }
}

/// AdamW with decoupled weight decay applied to matrices only (biases,
/// layer-norm parameters and the MLM output bias are not decayed).
#[derive(Debug, Clone)]
pub struct AdamW {
    config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(model: &Model, config: OptimizerConfig) -> Self {
        let tensors = model.tensors();
        AdamW {
            config,
            m: tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            decay: tensors.iter().map(|t| t.shape.len() == 2).collect(),
            t: 0,
        }
    }

    /// Clips `grads` in place and returns the norm before clipping.
    pub fn clip(&self, grads: &mut Model) -> f64 {
        let mut tensors = grads.tensors_mut();
        let norm = tensors
            .iter()
            .flat_map(|(_, d)| d.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            let k = self.config.clip_norm / norm;
            for (_, d) in tensors.iter_mut() {
                d.iter_mut().for_each(|g| *g *= k);
            }
        }
        norm
    }

    pub fn step(&mut self, model: &mut Model, grads: &Model, lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let grads = grads.tensors();
        for (i, (_, p)) in model.tensors_mut().into_iter().enumerate() {
            let g = grads[i].data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if self.decay[i] { c.weight_decay } else { 0.0 };
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p[j] -= lr * (update + wd * p[j]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    V1,
    V2,
    BertStyle,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::V1, Preset::V2, Preset::BertStyle];

    pub fn name(self) -> &'static str {
        match self {
            Preset::V1 => "v1",
            Preset::V2 => "v2",
            Preset::BertStyle => "bert-style",
        }
    }

    /// (steps, batch size)
    pub fn schedule(self) -> (usize, usize) {
        match self {
            Preset::V1 => (100_000, 1024),
            Preset::V2 => (100_000, 4096),
            Preset::BertStyle => (1_000_000, 256),
        }
    }
}

impl FromStr for Preset {
    type Err = TrainingError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| TrainingError::UnknownPreset(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Loss is averaged over and reported every `log_every` steps.
    pub log_every: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_steps: 20,
            seed: 0,
            log_every: 10,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let (steps, batch_size) = preset.schedule();
        PretrainConfig {
            steps,
            batch_size,
            peak_lr: 6e-4,
            warmup_steps: steps / 10,
            log_every: 100,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainingError::Config(m.to_string()));
        if self.steps == 0 {
            return err("steps must be positive");
        }
        if self.warmup_steps > self.steps {
            return err("warmup_steps exceeds steps");
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return err("batch_size and log_every must be positive");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return err("peak_lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// Last step (1-based) of the window.
    pub step: usize,
    /// Mean loss over the window.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Model,
    pub loss_curve: Vec<LossPoint>,
    pub steps_run: usize,
}

impl PretrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_curve.last().map(|p| p.loss)
    }
}

/// Short hash of a batch's inputs and labels, for error reports.
pub fn batch_fingerprint(b: &MaskedBatch) -> String {
    let mut h = Sha256::new();
    for id in &b.input_ids {
        h.update(id.to_le_bytes());
    }
    for l in &b.labels {
        h.update(l.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

fn epoch_order(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut row_rng(seed ^ 0x5851_f42d_4c95_7f2d, epoch, 0));
    order
}

/// Runs `config.steps` AdamW steps of MLM on `corpus`.
///
/// Sequences are visited in a fresh shuffled order each epoch and a new
/// mask is drawn for every visit from the stream keyed by
/// `(seed, epoch, position in epoch)`.
pub fn pretrain(
    mut model: Model,
    corpus: &PackedCorpus,
    tokenizer_fingerprint: &str,
    vocab: &MaskingVocab,
    policy: &MaskingPolicy,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    policy.validate()?;
    if corpus.tokenizer_fingerprint != tokenizer_fingerprint {
        return Err(TrainingError::FingerprintMismatch {
            expected: tokenizer_fingerprint.to_string(),
            found: corpus.tokenizer_fingerprint.clone(),
        });
    }
    let n = corpus.sequences.len();
    if n == 0 {
        return Err(TrainingError::EmptySplit("pretraining"));
    }
    let mut opt = AdamW::new(&model, config.optimizer);
    let mut drop_rng = dropout_rng(config.seed);
    let mut order_epoch = u32::MAX;
    let mut order = Vec::new();
    let mut curve = Vec::with_capacity(config.steps / config.log_every);
    let mut window = 0.0;
    for step in 0..config.steps {
        let mut rows = Vec::with_capacity(config.batch_size);
        for i in 0..config.batch_size {
            let p = step * config.batch_size + i;
            let epoch = (p / n) as u32;
            if epoch != order_epoch {
                order = epoch_order(n, config.seed, epoch);
                order_epoch = epoch;
            }
            let mut rng = row_rng(config.seed, epoch, (p % n) as u32);
            rows.push(apply_dynamic_mask(&corpus.sequences[order[p % n]], policy, vocab, &mut rng));
        }
        let batch = MaskedBatch::from_rows(rows)?;
        let mut grads = model.zeros_like();
        let out = model.mlm_loss(&batch, Some(&mut drop_rng), Some(&mut grads))?;
        if !out.loss.is_finite() {
            return Err(TrainingError::NonFiniteLoss {
                step,
                batch_fingerprint: batch_fingerprint(&batch),
            });
        }
        opt.clip(&mut grads);
        let lr = learning_rate(step, config.steps, config.warmup_steps, config.peak_lr);
        opt.step(&mut model, &grads, lr);
        window += out.loss;
        if (step + 1) % config.log_every == 0 {
            curve.push(LossPoint {
                step: step + 1,
                loss: window / config.log_every as f64,
            });
            window = 0.0;
        }
    }
    Ok(PretrainOutcome {
        model,
        loss_curve: curve,
        steps_run: config.steps,
    })
}

// ---------------------------------------------------------------------------
// Fine-tuning data

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ner,
    Volume,
    Chapter,
    Subject,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ner => "ner",
            Task::Volume => "volume",
            Task::Chapter => "chapter",
            Task::Subject => "subject",
        }
    }

    pub fn level(self) -> Option<Level> {
        match self {
            Task::Ner => None,
            Task::Volume => Some(Level::Volume),
            Task::Chapter => Some(Level::Chapter),
            Task::Subject => Some(Level::Subject),
        }
    }
}

impl FromStr for Task {
    type Err = TrainingError;

    fn from_str(s: &str) -> Result<Self> {
        [Task::Ner, Task::Volume, Task::Chapter, Task::Subject]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| TrainingError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Per-position tag labels ([`IGNORE`] except at each word's first
    /// subword), the position of each word's first subword (`None` when
    /// the word was truncated away) and the gold word tags.
    Tags {
        labels: Vec<i64>,
        word_positions: Vec<Option<usize>>,
        gold: Vec<Tag>,
    },
    Label(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub ids: Vec<TokenId>,
    pub target: Target,
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: Task,
    pub num_labels: usize,
    /// Entity types for NER; empty for classification.
    pub types: Option<EntityTypeSet>,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    /// Padded length used for every batch: the longest example.
    pub fn seq_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .map(|e| e.ids.len())
            .max()
            .unwrap_or(0)
    }
}

/// Tokenizes a tagged sentence word by word. Words after the first carry a
/// leading space, as they would in running text. Only the first subword of
/// each word is labelled.
pub fn prepare_ner_example(
    sentence: &NerSentence,
    tokenizer: &TokenizerModel,
    norm: &NormConfig,
    types: &EntityTypeSet,
    max_len: usize,
) -> Example {
    let s = tokenizer.specials();
    let mut ids = vec![s.bos.id];
    let mut labels = vec![IGNORE];
    let mut word_positions = Vec::with_capacity(sentence.len());
    for (i, (word, tag)) in sentence.tokens.iter().zip(&sentence.tags).enumerate() {
        let text = normalize(word, norm);
        let text = if i == 0 { text } else { format!(" {text}") };
        let mut pieces = tokenizer.encode(&text).ids;
        if pieces.is_empty() || (i > 0 && text.trim().is_empty()) {
            pieces = vec![s.unk.id];
        }
        if ids.len() + pieces.len() + 1 > max_len {
            word_positions.push(None);
            continue;
        }
        word_positions.push(Some(ids.len()));
        let tag_id = types.tag_index(tag).expect("tags validated against the type set") as i64;
        for (k, &p) in pieces.iter().enumerate() {
            ids.push(p);
            labels.push(if k == 0 { tag_id } else { IGNORE });
        }
    }
    ids.push(s.eos.id);
    labels.push(IGNORE);
    Example {
        ids,
        target: Target::Tags {
            labels,
            word_positions,
            gold: sentence.tags.clone(),
        },
    }
}

pub fn prepare_classification_example(
    record: &ClassificationRecord,
    level: Level,
    tokenizer: &TokenizerModel,
    norm: &NormConfig,
    max_len: usize,
) -> Example {
    let s = tokenizer.specials();
    let mut body = tokenizer.encode(&normalize(&record.text, norm)).ids;
    body.truncate(max_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(body.len() + 2);
    ids.push(s.bos.id);
    ids.extend(body);
    ids.push(s.eos.id);
    Example {
        ids,
        target: Target::Label(record.label(level)),
    }
}

struct Batch {
    ids: Vec<TokenId>,
    mask: Vec<u8>,
    tag_labels: Vec<i64>,
    labels: Vec<usize>,
    rows: usize,
    seq_len: usize,
}

impl Batch {
    fn new(examples: &[&Example], seq_len: usize, pad: TokenId) -> Self {
        let mut b = Batch {
            ids: Vec::with_capacity(examples.len() * seq_len),
            mask: Vec::with_capacity(examples.len() * seq_len),
            tag_labels: Vec::new(),
            labels: Vec::new(),
            rows: examples.len(),
            seq_len,
        };
        for e in examples {
            let n = e.ids.len();
            b.ids.extend_from_slice(&e.ids);
            b.ids.resize(b.ids.len() + seq_len - n, pad);
            b.mask.extend(std::iter::repeat_n(1, n));
            b.mask.extend(std::iter::repeat_n(0, seq_len - n));
            match &e.target {
                Target::Tags { labels, .. } => {
                    b.tag_labels.extend_from_slice(labels);
                    b.tag_labels.extend(std::iter::repeat_n(IGNORE, seq_len - n));
                }
                Target::Label(l) => b.labels.push(*l),
            }
        }
        b
    }

    fn input(&self) -> EncoderInput<'_> {
        EncoderInput::new(&self.ids, &self.mask, self.rows, self.seq_len)
    }
}

// ---------------------------------------------------------------------------
// Fine-tuning

fn default_warmup_ratio() -> f64 {
    0.1
}

fn default_max_len() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 3,
            learning_rate: 5e-5,
            batch_size: 8,
            seed: 0,
            warmup_ratio: default_warmup_ratio(),
            max_len: default_max_len(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainingError::Config(m.to_string()));
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return err("warmup_ratio must lie in [0, 1]");
        }
        if self.max_len < 3 {
            return err("max_len must be at least 3");
        }
        Ok(())
    }

    /// Same run with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        FinetuneConfig { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskMetrics {
    Ner(NerReport),
    Cls(ClsReport),
}

impl TaskMetrics {
    /// Model-selection metric: micro F1.
    pub fn micro_f1(&self) -> f64 {
        match self {
            TaskMetrics::Ner(r) => r.micro.f1,
            TaskMetrics::Cls(r) => r.f1,
        }
    }

    pub fn named_values(&self) -> Vec<(String, f64)> {
        match self {
            TaskMetrics::Ner(r) => r.metrics(),
            TaskMetrics::Cls(r) => vec![
                ("precision".into(), r.precision),
                ("recall".into(), r.recall),
                ("f1".into(), r.f1),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: TaskMetrics,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
}

impl FinetuneOutcome {
    pub fn final_validation(&self) -> &TaskMetrics {
        &self.epochs.last().expect("at least one epoch").validation
    }
}

fn check_head(model: &Model, data: &TaskData) -> Result<()> {
    let actual = match data.task {
        Task::Ner => model.head_shapes().token_cls,
        _ => model.head_shapes().seq_cls,
    };
    let head = if data.task == Task::Ner {
        "token classification"
    } else {
        "sequence classification"
    };
    match actual {
        None => Err(ModelError::MissingHead(head).into()),
        Some(a) if a != data.num_labels => Err(ModelError::HeadMismatch {
            head,
            expected: data.num_labels,
            actual: a,
        }
        .into()),
        Some(_) => Ok(()),
    }
}

/// Trains a freshly initialized task head together with the encoder.
/// Any existing head for the task is replaced. After every epoch the
/// validation split is scored.
pub fn finetune(base: &Model, data: &TaskData, config: &FinetuneConfig) -> Result<FinetuneOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainingError::EmptySplit("train"));
    }
    if data.validation.is_empty() {
        return Err(TrainingError::EmptySplit("validation"));
    }
    let mut model = base.clone();
    let head_seed = config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    match data.task {
        Task::Ner => model.attach_token_cls(data.num_labels, head_seed),
        _ => model.attach_seq_cls(data.num_labels, head_seed),
    }
    let seq_len = data.seq_len();
    let pad = 1;
    let mut opt = AdamW::new(&model, config.optimizer);
    let mut drop_rng = dropout_rng(config.seed);
    let batches_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total = batches_per_epoch * config.epochs;
    let warmup = (config.warmup_ratio * total as f64).round() as usize;
    let mut step = 0;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(data.train.len(), config.seed, epoch as u32);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::new(&examples, seq_len, pad);
            let mut grads = model.zeros_like();
            let out = if data.task == Task::Ner {
                model.token_cls_loss(&batch.input(), &batch.tag_labels, Some(&mut drop_rng), Some(&mut grads))?
            } else {
                model.seq_cls_loss(&batch.input(), &batch.labels, Some(&mut drop_rng), Some(&mut grads))?
            };
            if !out.loss.is_finite() {
                return Err(TrainingError::NonFiniteLoss {
                    step,
                    batch_fingerprint: hex::encode(&Sha256::digest(
                        batch.ids.iter().flat_map(|i| i.to_le_bytes()).collect::<Vec<u8>>(),
                    )[..8]),
                });
            }
            opt.clip(&mut grads);
            opt.step(&mut model, &grads, learning_rate(step, total, warmup, config.learning_rate));
            loss_sum += out.loss;
            step += 1;
        }
        let validation = evaluate(&model, data, &data.validation)?;
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / batches_per_epoch as f64,
            validation,
        });
    }
    Ok(FinetuneOutcome { model, epochs })
}

const EVAL_BATCH: usize = 16;

/// Scores `examples` with the model's head for `data.task`, in inference
/// mode. For NER, each word takes the tag predicted at its first subword;
/// truncated words are predicted `O`.
pub fn evaluate(model: &Model, data: &TaskData, examples: &[Example]) -> Result<TaskMetrics> {
    check_head(model, data)?;
    if examples.is_empty() {
        return Err(TrainingError::EmptySplit("evaluation"));
    }
    let seq_len = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
    let mut gold_tags = Vec::new();
    let mut pred_tags = Vec::new();
    let mut gold_labels = Vec::new();
    let mut pred_labels = Vec::new();
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::new(&refs, seq_len, 1);
        if data.task == Task::Ner {
            let types = data.types.as_ref().expect("NER data carries its type set");
            let logits = model.forward_token_cls(&batch.input(), Some(data.num_labels))?;
            for (r, e) in chunk.iter().enumerate() {
                let Target::Tags { word_positions, gold, .. } = &e.target else {
                    unreachable!("NER examples carry tag targets")
                };
                let pred = word_positions
                    .iter()
                    .map(|p| match p {
                        Some(j) => {
                            let row = logits.slice(ndarray::s![r, *j, ..]);
                            types.tag_at(argmax(row.iter().copied())).expect("head sized to tag set")
                        }
                        None => Tag::Outside,
                    })
                    .collect();
                gold_tags.push(gold.clone());
                pred_tags.push(pred);
            }
        } else {
            let logits = model.forward_seq_cls(&batch.input(), Some(data.num_labels))?;
            for (r, e) in chunk.iter().enumerate() {
                let Target::Label(l) = e.target else {
                    unreachable!("classification examples carry labels")
                };
                gold_labels.push(l);
                pred_labels.push(argmax(logits.row(r).iter().copied()));
            }
        }
    }
    Ok(match data.task {
        Task::Ner => TaskMetrics::Ner(score_ner(
            &gold_tags,
            &pred_tags,
            data.types.as_ref().expect("NER data carries its type set"),
        )?),
        t => TaskMetrics::Cls(score_classification(&gold_labels, &pred_labels, data.num_labels, t.level())?),
    })
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

// ---------------------------------------------------------------------------
// Grid search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub epochs: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl GridSpec {
    pub fn ner() -> Self {
        GridSpec {
            epochs: (1..=20).collect(),
            learning_rates: vec![2e-5, 3e-5, 5e-5],
            batch_sizes: vec![8, 16],
        }
    }

    pub fn classification() -> Self {
        GridSpec {
            epochs: (1..=20).collect(),
            learning_rates: vec![1e-5, 2e-5, 3e-5, 5e-5],
            batch_sizes: vec![8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs.is_empty() || self.learning_rates.is_empty() || self.batch_sizes.is_empty() {
            return Err(TrainingError::Config("every grid axis needs at least one value".into()));
        }
        Ok(())
    }

    /// Grid points in (epochs, learning rate, batch size) order.
    pub fn points(&self) -> Vec<(usize, f64, usize)> {
        let mut out = Vec::new();
        for &e in &self.epochs {
            for &lr in &self.learning_rates {
                for &b in &self.batch_sizes {
                    out.push((e, lr, b));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_micro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: FinetuneConfig,
    pub rows: Vec<GridRow>,
}

/// Highest validation micro F1; ties go to fewer epochs, then the lower
/// learning rate, then the smaller batch.
pub fn select_best(rows: &[GridRow]) -> Option<&GridRow> {
    rows.iter().min_by(|a, b| {
        b.validation_micro_f1
            .total_cmp(&a.validation_micro_f1)
            .then(a.epochs.cmp(&b.epochs))
            .then(a.learning_rate.total_cmp(&b.learning_rate))
            .then(a.batch_size.cmp(&b.batch_size))
    })
}

/// Fine-tunes every grid point from `base` (points run in parallel) and
/// selects by validation micro F1. Non-grid fields come from `template`.
pub fn grid_search(base: &Model, data: &TaskData, grid: &GridSpec, template: &FinetuneConfig) -> Result<GridOutcome> {
    grid.validate()?;
    let rows = grid
        .points()
        .into_par_iter()
        .map(|(epochs, learning_rate, batch_size)| {
            let cfg = FinetuneConfig {
                epochs,
                learning_rate,
                batch_size,
                ..template.clone()
            };
            let out = finetune(base, data, &cfg)?;
            Ok(GridRow {
                epochs,
                learning_rate,
                batch_size,
                seed: template.seed,
                validation_micro_f1: out.final_validation().micro_f1(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(&rows).expect("grid is non-empty");
    let best = FinetuneConfig {
        epochs: best.epochs,
        learning_rate: best.learning_rate,
        batch_size: best.batch_size,
        ..template.clone()
    };
    Ok(GridOutcome { best, rows })
}

pub fn render_grid_table(rows: &[GridRow]) -> String {
    let mut out = String::from("epochs\tlearning_rate\tbatch_size\tseed\tvalidation_micro_f1\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:e}\t{}\t{}\t{:.6}",
            r.epochs, r.learning_rate, r.batch_size, r.seed, r.validation_micro_f1
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Seed aggregation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub task: Task,
    pub config: FinetuneConfig,
    pub seed: u64,
    pub validation: BTreeMap<String, f64>,
    pub test: BTreeMap<String, f64>,
}

impl RunResult {
    pub fn new(task: Task, config: &FinetuneConfig, validation: &TaskMetrics, test: &TaskMetrics) -> Self {
        RunResult {
            task,
            config: config.clone(),
            seed: config.seed,
            validation: validation.named_values().into_iter().collect(),
            test: test.named_values().into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub task: Task,
    pub seeds: Vec<u64>,
    pub validation: BTreeMap<String, MeanStd>,
    pub test: BTreeMap<String, MeanStd>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MeanStd { mean, std: var.sqrt() }
}

/// `"mean (std)"` with the given number of decimals.
pub fn format_mean_std(m: MeanStd, decimals: usize) -> String {
    format!("{:.*} ({:.*})", decimals, m.mean, decimals, m.std)
}

pub fn aggregate_seeds(results: &[RunResult]) -> Result<SeedAggregate> {
    if results.len() < 2 {
        return Err(TrainingError::TooFewRuns(results.len()));
    }
    let mut sorted: Vec<&RunResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.seed);
    let first = sorted[0];
    let reference = first.config.with_seed(0);
    for r in &sorted[1..] {
        if r.task != first.task {
            return Err(TrainingError::MismatchedConfigs(format!(
                "tasks {} and {}",
                first.task.name(),
                r.task.name()
            )));
        }
        if r.config.with_seed(0) != reference {
            return Err(TrainingError::MismatchedConfigs(format!("seed {} differs beyond its seed", r.seed)));
        }
        if r.validation.keys().ne(first.validation.keys()) || r.test.keys().ne(first.test.keys()) {
            return Err(TrainingError::MismatchedConfigs(format!("seed {} reports different metrics", r.seed)));
        }
    }
    let reduce = |pick: fn(&RunResult) -> &BTreeMap<String, f64>| -> BTreeMap<String, MeanStd> {
        pick(first)
            .keys()
            .map(|k| {
                let vals: Vec<f64> = sorted.iter().map(|r| pick(r)[k]).collect();
                (k.clone(), mean_std(&vals))
            })
            .collect()
    };
    Ok(SeedAggregate {
        task: first.task,
        seeds: sorted.iter().map(|r| r.seed).collect(),
        validation: reduce(|r| &r.validation),
        test: reduce(|r| &r.test),
    })
}

/// One row per (config, seed).
pub fn render_results_table(results: &[RunResult]) -> String {
    let keys: Vec<&String> = results.first().map(|r| r.test.keys().collect()).unwrap_or_default();
    let mut out = String::from("task\tepochs\tlearning_rate\tbatch_size\tseed");
    for k in &keys {
        let _ = write!(out, "\tval_{k}");
    }
    for k in &keys {
        let _ = write!(out, "\ttest_{k}");
    }
    out.push('\n');
    for r in results {
        let _ = write!(
            out,
            "{}\t{}\t{:e}\t{}\t{}",
            r.task.name(),
            r.config.epochs,
            r.config.learning_rate,
            r.config.batch_size,
            r.seed
        );
        for k in &keys {
            let _ = write!(out, "\t{:.6}", r.validation.get(*k).copied().unwrap_or(f64::NAN));
        }
        for k in &keys {
            let _ = write!(out, "\t{:.6}", r.test.get(*k).copied().unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}

/// Written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub command: String,
    pub config: serde_json::Value,
    /// Input path and SHA-256 of its contents.
    pub inputs: Vec<(PathBuf, String)>,
    pub tokenizer_fingerprint: Option<String>,
    pub crate_version: String,
}
