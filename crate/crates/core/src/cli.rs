//! `nomos` command line: one subcommand per pipeline stage, configured by
//! a strict TOML run file.
//!
//! Relative paths in a run file resolve against the file's directory.
//! Stage outputs default to `<root>/<stage>` where the root is the run
//! file's `output_dir`, else `$NOMOS_OUT`, else `./runs`. Downstream
//! stages find upstream artifacts in the same root unless given a path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    load_classification, load_iob, pack_sequences, split, CorpusError, CorpusManifest, EntityTypeSet, LabelHierarchy,
    PackedCorpus, SplitSpec,
};
use crate::masking::{collate, render_masked_row, MaskingPolicy, MaskingVocab};
use crate::metrics::{render_cls_report, render_ner_report, type_abbreviation};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, ModelError};
use crate::textnorm::{normalize_corpus, NormConfig, NormReportLine, DEFAULT_CORRUPTION_THRESHOLD};
use crate::tokenizer::{train_bpe, SpecialTokenNames, TokenizerError, TokenizerModel};
use crate::training::{
    aggregate_seeds, evaluate, finetune, format_mean_std, grid_search, prepare_classification_example,
    prepare_ner_example, pretrain, render_grid_table, render_results_table, Example, FinetuneConfig, GridSpec,
    PretrainConfig, Preset, RunDescriptor, RunResult, SeedAggregate, Task, TaskData, TaskMetrics, TrainingError,
};

pub const OUTPUT_ROOT_ENV: &str = "NOMOS_OUT";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const RUN_DESCRIPTOR_FILE: &str = "run.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{0}")]
    Usage(String),
    #[error("corrupted input, over the replacement threshold: {}", .0.join(", "))]
    Corruption(Vec<String>),
    #[error("task/head mismatch: {0}")]
    TaskHead(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Masking(#[from] crate::masking::MaskingError),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Training(TrainingError),
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::MissingHead(_) | ModelError::HeadMismatch { .. } => CliError::TaskHead(e.to_string()),
            e => CliError::Model(e),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Model(m) => m.into(),
            e => CliError::Training(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Corruption(_) => 2,
            CliError::TaskHead(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Run file

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub ner: Option<PathBuf>,
    pub classification: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub corruption_threshold: f64,
    /// Packed pretraining sequence length.
    pub pack_len: usize,
    /// Repair dangling `I-` tags instead of rejecting the file.
    pub repair_iob: bool,
    pub split: SplitSpec,
    pub entity_types: EntityTypeSet,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            corruption_threshold: DEFAULT_CORRUPTION_THRESHOLD,
            pack_len: 512,
            repair_iob: true,
            split: SplitSpec::default(),
            entity_types: EntityTypeSet::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    pub specials: SpecialTokenNames,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection {
            vocab_size: 8000,
            specials: SpecialTokenNames::default(),
        }
    }
}

/// Model settings; `vocab_size` comes from the tokenizer when omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: Option<usize>,
    pub max_positions: usize,
    pub dropout: f64,
    pub mixed_precision: bool,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::toy(0);
        ModelSection {
            num_layers: t.num_layers,
            hidden_dim: t.hidden_dim,
            num_heads: t.num_heads,
            ffn_dim: t.ffn_dim,
            vocab_size: None,
            max_positions: t.max_positions,
            dropout: t.dropout,
            mixed_precision: false,
            init_seed: 0,
        }
    }
}

impl ModelSection {
    fn resolve(&self, tokenizer_vocab: usize) -> Result<ModelConfig> {
        if let Some(v) = self.vocab_size {
            if v != tokenizer_vocab {
                return Err(CliError::Usage(format!(
                    "model.vocab_size {v} differs from the tokenizer's {tokenizer_vocab}"
                )));
            }
        }
        let c = ModelConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            vocab_size: tokenizer_vocab,
            max_positions: self.max_positions,
            dropout: self.dropout,
            mixed_precision: self.mixed_precision,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub output_dir: Option<PathBuf>,
    pub paths: Paths,
    pub normalize: NormConfig,
    pub corpus: CorpusSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub masking: MaskingPolicy,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub grid: GridSpec,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            output_dir: None,
            paths: Paths::default(),
            normalize: NormConfig::default(),
            corpus: CorpusSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            masking: MaskingPolicy::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            grid: GridSpec::ner(),
        }
    }
}

/// A parsed run file with its paths made absolute.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfigFile,
    pub source: Option<PathBuf>,
}

impl RunConfigFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            reason: e.message().to_string(),
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.paths.manifest);
        fix(&mut self.paths.ner);
        fix(&mut self.paths.classification);
        fix(&mut self.paths.hierarchy);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(LoadedConfig {
                config: RunConfigFile::default(),
                source: None,
            });
        };
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config = RunConfigFile::parse(&text, path)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        config.validate(path)?;
        Ok(LoadedConfig {
            config,
            source: Some(path.to_path_buf()),
        })
    }

    fn root(&self) -> PathBuf {
        self.config
            .output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    fn stage_dir(&self, explicit: Option<&Path>, stage: &str) -> PathBuf {
        explicit.map(Path::to_path_buf).unwrap_or_else(|| self.root().join(stage))
    }

    fn required(&self, p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        p.clone().ok_or_else(|| {
            CliError::Usage(format!(
                "paths.{key} must be set in the run file{}",
                self.source
                    .as_ref()
                    .map(|s| format!(" ({})", s.display()))
                    .unwrap_or_default()
            ))
        })
    }
}

impl RunConfigFile {
    fn validate(&self, origin: &Path) -> Result<()> {
        let bad = |reason: String| CliError::Config {
            path: origin.to_path_buf(),
            reason,
        };
        self.corpus.split.validate()?;
        self.masking.validate().map_err(|e| bad(e.to_string()))?;
        self.pretrain.validate().map_err(|e| bad(e.to_string()))?;
        self.finetune.validate().map_err(|e| bad(e.to_string()))?;
        self.grid.validate().map_err(|e| bad(e.to_string()))?;
        self.tokenizer.specials.validate()?;
        if !(0.0..=1.0).contains(&self.corpus.corruption_threshold) {
            return Err(bad("corpus.corruption_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Arguments

#[derive(Debug, Parser)]
#[command(name = "nomos", version, about = "Greek legal-text language model pipeline")]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode and normalize every document of a corpus manifest.
    Normalize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the byte-level BPE tokenizer on a corpus manifest.
    TokenizerTrain {
        /// Corpus manifest (defaults to paths.manifest).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MLM pretraining on the manifest corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Replace steps and batch size with a named schedule (v1, v2, bert-style).
        #[arg(long)]
        preset: Option<String>,
        /// Print the first masked batch in aligned columns before training.
        #[arg(long)]
        dump_masked_batch: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on a task.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Overrides finetune.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune every point of the configured grid and keep the best.
    GridSearch {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a fine-tuned checkpoint on one split.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate stored run results over seeds into a results table.
    Report {
        /// JSONL files of run results, or single run_result.json files.
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: TrainingError| e.to_string())
}

// ---------------------------------------------------------------------------
// Shared helpers

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_provenance(
    out: &Path,
    command: &str,
    cfg: &LoadedConfig,
    inputs: &[PathBuf],
    tokenizer_fingerprint: Option<String>,
) -> Result<()> {
    write(&out.join(RESOLVED_CONFIG_FILE), cfg.config.to_toml())?;
    let mut hashed = Vec::new();
    for p in inputs {
        hashed.push((p.clone(), sha256_file(p)?));
    }
    let desc = RunDescriptor {
        command: command.to_string(),
        config: serde_json::to_value(&cfg.config).expect("config serializes"),
        inputs: hashed,
        tokenizer_fingerprint,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write(
        &out.join(RUN_DESCRIPTOR_FILE),
        serde_json::to_string_pretty(&desc).expect("descriptor serializes") + "\n",
    )
}

/// Reads and normalizes a manifest corpus, failing on corrupted documents.
fn normalized_corpus(manifest_path: &Path, cfg: &RunConfigFile) -> Result<(CorpusManifest, Vec<String>, Vec<NormReportLine>)> {
    let manifest = CorpusManifest::load(manifest_path)?;
    let docs = manifest.read_documents()?;
    let results = normalize_corpus(&docs, &cfg.normalize, cfg.corpus.corruption_threshold);
    let (texts, reports): (Vec<_>, Vec<_>) = results.into_iter().map(|(d, r)| (d.text, r)).unzip();
    Ok((manifest, texts, reports))
}

fn flagged(reports: &[NormReportLine]) -> Vec<String> {
    reports.iter().filter(|r| r.flagged).map(|r| r.source_id.clone()).collect()
}

fn input_manifests(manifest: &CorpusManifest, manifest_path: &Path) -> Vec<PathBuf> {
    let mut v = vec![manifest_path.to_path_buf()];
    v.extend(manifest.entries.iter().map(|e| manifest.resolve(e)));
    v
}

fn load_tokenizer(dir: &Path) -> Result<TokenizerModel> {
    if !dir.is_dir() {
        return Err(CliError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "tokenizer directory not found"),
        });
    }
    Ok(TokenizerModel::load(dir)?)
}

fn checkpoint_task(desc: &crate::model::CheckpointDescriptor) -> Option<Task> {
    desc.training
        .as_ref()
        .and_then(|t| t.get("task"))
        .and_then(|t| t.as_str())
        .and_then(|t| t.parse().ok())
}

/// Builds train/validation/test examples for `task` from the run file.
fn load_task_data(task: Task, cfg: &LoadedConfig, tokenizer: &TokenizerModel) -> Result<(TaskData, Vec<PathBuf>)> {
    let c = &cfg.config;
    let max_len = c.finetune.max_len;
    match task {
        Task::Ner => {
            let path = cfg.required(&c.paths.ner, "ner")?;
            let types = c.corpus.entity_types.clone();
            let sentences = load_iob(&path, &types, c.corpus.repair_iob)?;
            let parts = split(sentences, &c.corpus.split)?;
            let prep = |v: &[crate::corpus::NerSentence]| -> Vec<Example> {
                v.iter()
                    .map(|s| prepare_ner_example(s, tokenizer, &c.normalize, &types, max_len))
                    .collect()
            };
            let data = TaskData {
                task,
                num_labels: types.num_tags(),
                train: prep(&parts.train),
                validation: prep(&parts.val),
                test: prep(&parts.test),
                types: Some(types),
            };
            Ok((data, vec![path]))
        }
        _ => {
            let level = task.level().expect("classification task");
            let path = cfg.required(&c.paths.classification, "classification")?;
            let hpath = cfg.required(&c.paths.hierarchy, "hierarchy")?;
            let hierarchy = LabelHierarchy::load(&hpath)?;
            let records = load_classification(&path, &hierarchy)?;
            let parts = split(records, &c.corpus.split)?;
            let prep = |v: &[crate::corpus::ClassificationRecord]| -> Vec<Example> {
                v.iter()
                    .map(|r| prepare_classification_example(r, level, tokenizer, &c.normalize, max_len))
                    .collect()
            };
            let data = TaskData {
                task,
                num_labels: hierarchy.num_labels(level),
                types: None,
                train: prep(&parts.train),
                validation: prep(&parts.val),
                test: prep(&parts.test),
            };
            Ok((data, vec![path, hpath]))
        }
    }
}

fn render_metrics(m: &TaskMetrics) -> String {
    match m {
        TaskMetrics::Ner(r) => render_ner_report(r),
        TaskMetrics::Cls(r) => render_cls_report(r),
    }
}

// ---------------------------------------------------------------------------
// Commands

pub fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // A pool may already exist when called repeatedly in-process; the
        // first configuration stays in effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match cli.command {
        Command::Normalize { manifest, config, out } => cmd_normalize(&manifest, config.as_deref(), out.as_deref()),
        Command::TokenizerTrain {
            input,
            vocab_size,
            config,
            out,
        } => cmd_tokenizer_train(input.as_deref(), vocab_size, config.as_deref(), out.as_deref()),
        Command::Pretrain {
            config,
            tokenizer,
            preset,
            dump_masked_batch,
            out,
        } => cmd_pretrain(
            config.as_deref(),
            tokenizer.as_deref(),
            preset.as_deref(),
            dump_masked_batch,
            out.as_deref(),
        ),
        Command::Finetune {
            config,
            task,
            checkpoint,
            tokenizer,
            seed,
            out,
        } => cmd_finetune(
            config.as_deref(),
            task,
            checkpoint.as_deref(),
            tokenizer.as_deref(),
            seed,
            out.as_deref(),
        ),
        Command::GridSearch {
            config,
            task,
            checkpoint,
            tokenizer,
            out,
        } => cmd_grid_search(config.as_deref(), task, checkpoint.as_deref(), tokenizer.as_deref(), out.as_deref()),
        Command::Evaluate {
            config,
            task,
            checkpoint,
            tokenizer,
            split,
            out,
        } => cmd_evaluate(
            config.as_deref(),
            task,
            checkpoint.as_deref(),
            tokenizer.as_deref(),
            split,
            out.as_deref(),
        ),
        Command::Report { runs, out } => cmd_report(&runs, out.as_deref()),
    }
}

pub fn cmd_normalize(manifest_path: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = LoadedConfig::load(config)?;
    let out = cfg.stage_dir(out, "normalize");
    let (manifest, texts, reports) = normalized_corpus(manifest_path, &cfg.config)?;
    create_dir(&out)?;
    let mut lines = String::new();
    let mut normalized_manifest = String::new();
    for ((entry, text), report) in manifest.entries.iter().zip(&texts).zip(&reports) {
        let file = format!("{}.txt", entry.name);
        write(&out.join(&file), text)?;
        lines.push_str(&serde_json::to_string(report).expect("report serializes"));
        lines.push('\n');
        let m = serde_json::json!({
            "name": entry.name,
            "path": file,
            "encoding": "utf-8",
            "context": entry.context,
        });
        normalized_manifest.push_str(&m.to_string());
        normalized_manifest.push('\n');
    }
    write(&out.join("report.jsonl"), lines)?;
    write(&out.join("manifest.jsonl"), normalized_manifest)?;
    write_provenance(&out, "normalize", &cfg, &input_manifests(&manifest, manifest_path), None)?;
    let bad = flagged(&reports);
    if !bad.is_empty() {
        return Err(CliError::Corruption(bad));
    }
    println!("normalized {} documents into {}", texts.len(), out.display());
    Ok(())
}

pub fn cmd_tokenizer_train(
    input: Option<&Path>,
    vocab_size: Option<usize>,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = LoadedConfig::load(config)?;
    if let Some(v) = vocab_size {
        cfg.config.tokenizer.vocab_size = v;
    }
    let manifest_path = match input {
        Some(p) => p.to_path_buf(),
        None => cfg.required(&cfg.config.paths.manifest, "manifest")?,
    };
    let out = cfg.stage_dir(out, "tokenizer");
    let (manifest, texts, reports) = normalized_corpus(&manifest_path, &cfg.config)?;
    let bad = flagged(&reports);
    if !bad.is_empty() {
        return Err(CliError::Corruption(bad));
    }
    let (model, report) = train_bpe(&texts, cfg.config.tokenizer.vocab_size, &cfg.config.tokenizer.specials)?;
    create_dir(&out)?;
    model.save(&out)?;
    write(
        &out.join("train_report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "target_vocab_size": report.target_vocab_size,
            "actual_vocab_size": report.actual_vocab_size,
            "merges": report.merges,
            "skipped_duplicates": report.skipped_duplicates,
            "fingerprint": model.fingerprint(),
        }))
        .expect("report serializes")
            + "\n",
    )?;
    write_provenance(
        &out,
        "tokenizer-train",
        &cfg,
        &input_manifests(&manifest, &manifest_path),
        Some(model.fingerprint()),
    )?;
    if report.exhausted() {
        eprintln!(
            "warning: corpus supports only {} of {} requested tokens",
            report.actual_vocab_size, report.target_vocab_size
        );
    }
    println!("tokenizer with {} tokens written to {}", model.vocab_size(), out.display());
    Ok(())
}

pub fn cmd_pretrain(
    config: Option<&Path>,
    tokenizer: Option<&Path>,
    preset: Option<&str>,
    dump_masked_batch: bool,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = LoadedConfig::load(config)?;
    if let Some(p) = preset {
        let p: Preset = p.parse()?;
        let (steps, batch) = p.schedule();
        let c = &mut cfg.config.pretrain;
        c.steps = steps;
        c.batch_size = batch;
        c.warmup_steps = c.warmup_steps.min(steps);
    }
    let tok_dir = cfg.stage_dir(tokenizer, "tokenizer");
    let out = cfg.stage_dir(out, "pretrain");
    let tok = load_tokenizer(&tok_dir)?;
    let manifest_path = cfg.required(&cfg.config.paths.manifest, "manifest")?;
    let (manifest, texts, reports) = normalized_corpus(&manifest_path, &cfg.config)?;
    let bad = flagged(&reports);
    if !bad.is_empty() {
        return Err(CliError::Corruption(bad));
    }
    let c = &cfg.config;
    let encoded: Vec<Vec<u32>> = texts.iter().map(|t| tok.encode(t).ids).collect();
    let sequences = pack_sequences(&encoded, c.corpus.pack_len, tok.specials())?;
    let corpus = PackedCorpus {
        sequences,
        max_len: c.corpus.pack_len,
        tokenizer_fingerprint: tok.fingerprint(),
    };
    let model_cfg = c.model.resolve(tok.vocab_size())?;
    if model_cfg.max_positions < corpus.max_len {
        return Err(CliError::Usage(format!(
            "model.max_positions {} is below corpus.pack_len {}",
            model_cfg.max_positions, corpus.max_len
        )));
    }
    let vocab = MaskingVocab::from_tokenizer(&tok);
    if dump_masked_batch {
        let take = corpus.sequences.len().min(c.pretrain.batch_size);
        let mut rng = crate::masking::row_rng(c.pretrain.seed, 0, 0);
        let batch = collate(&corpus.sequences[..take], &c.masking, &vocab, &mut rng)?;
        for i in 0..batch.batch {
            println!("row {i}");
            print!("{}", render_masked_row(&batch.row(i), &tok));
        }
    }
    let model = Model::init(model_cfg, c.model.init_seed)?;
    let outcome = pretrain(model, &corpus, &tok.fingerprint(), &vocab, &c.masking, &c.pretrain)?;
    create_dir(&out)?;
    let training = serde_json::json!({
        "stage": "pretrain",
        "pretrain": c.pretrain,
        "masking": c.masking,
        "pack_len": c.corpus.pack_len,
    });
    save_checkpoint(&out, &outcome.model, &tok.fingerprint(), Some(training))?;
    let mut curve = String::from("step\tloss\n");
    for p in &outcome.loss_curve {
        let _ = writeln!(curve, "{}\t{:.6}", p.step, p.loss);
    }
    write(&out.join("loss_curve.tsv"), curve)?;
    let mut inputs = input_manifests(&manifest, &manifest_path);
    inputs.push(tok_dir.join(crate::tokenizer::VOCAB_FILE));
    inputs.push(tok_dir.join(crate::tokenizer::MERGES_FILE));
    write_provenance(&out, "pretrain", &cfg, &inputs, Some(tok.fingerprint()))?;
    println!(
        "pretrained {} steps; final loss {:.4}; checkpoint in {}",
        outcome.steps_run,
        outcome.final_loss().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn load_base(checkpoint: &Path, tok: &TokenizerModel) -> Result<Model> {
    let (model, desc) = load_checkpoint(checkpoint)?;
    if desc.tokenizer_fingerprint != tok.fingerprint() {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained with tokenizer {}, but {} was given",
            checkpoint.display(),
            desc.tokenizer_fingerprint,
            tok.fingerprint()
        )));
    }
    Ok(model)
}

pub fn cmd_finetune(
    config: Option<&Path>,
    task: Task,
    checkpoint: Option<&Path>,
    tokenizer: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = LoadedConfig::load(config)?;
    if let Some(s) = seed {
        cfg.config.finetune.seed = s;
    }
    let tok_dir = cfg.stage_dir(tokenizer, "tokenizer");
    let ckpt = cfg.stage_dir(checkpoint, "pretrain");
    let out = cfg.stage_dir(out, &format!("finetune-{}", task.name()));
    let tok = load_tokenizer(&tok_dir)?;
    let base = load_base(&ckpt, &tok)?;
    let (data, inputs) = load_task_data(task, &cfg, &tok)?;
    let ft = &cfg.config.finetune;
    let outcome = finetune(&base, &data, ft)?;
    let test = evaluate(&outcome.model, &data, &data.test)?;
    create_dir(&out)?;
    let training = serde_json::json!({ "stage": "finetune", "task": task.name(), "finetune": ft });
    save_checkpoint(&out, &outcome.model, &tok.fingerprint(), Some(training))?;
    let mut epochs = String::new();
    for e in &outcome.epochs {
        epochs.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
        epochs.push('\n');
    }
    write(&out.join("epochs.jsonl"), epochs)?;
    let result = RunResult::new(task, ft, outcome.final_validation(), &test);
    write(
        &out.join("run_result.json"),
        serde_json::to_string_pretty(&result).expect("run result serializes") + "\n",
    )?;
    let mut all_inputs = inputs;
    all_inputs.push(ckpt.join(crate::model::CHECKPOINT_WEIGHTS_FILE));
    write_provenance(&out, "finetune", &cfg, &all_inputs, Some(tok.fingerprint()))?;
    println!(
        "fine-tuned {} for {} epochs; validation micro F1 {:.4}; test micro F1 {:.4}",
        task.name(),
        ft.epochs,
        outcome.final_validation().micro_f1(),
        test.micro_f1()
    );
    Ok(())
}

pub fn cmd_grid_search(
    config: Option<&Path>,
    task: Task,
    checkpoint: Option<&Path>,
    tokenizer: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = LoadedConfig::load(config)?;
    let tok_dir = cfg.stage_dir(tokenizer, "tokenizer");
    let ckpt = cfg.stage_dir(checkpoint, "pretrain");
    let out = cfg.stage_dir(out, &format!("grid-{}", task.name()));
    let tok = load_tokenizer(&tok_dir)?;
    let base = load_base(&ckpt, &tok)?;
    let (data, mut inputs) = load_task_data(task, &cfg, &tok)?;
    let outcome = grid_search(&base, &data, &cfg.config.grid, &cfg.config.finetune)?;
    create_dir(&out)?;
    write(&out.join("grid.tsv"), render_grid_table(&outcome.rows))?;
    write(
        &out.join("best.json"),
        serde_json::to_string_pretty(&outcome.best).expect("config serializes") + "\n",
    )?;
    inputs.push(ckpt.join(crate::model::CHECKPOINT_WEIGHTS_FILE));
    write_provenance(&out, "grid-search", &cfg, &inputs, Some(tok.fingerprint()))?;
    println!(
        "best of {} points: epochs {}, learning rate {:e}, batch {}",
        outcome.rows.len(),
        outcome.best.epochs,
        outcome.best.learning_rate,
        outcome.best.batch_size
    );
    Ok(())
}

pub fn cmd_evaluate(
    config: Option<&Path>,
    task: Task,
    checkpoint: Option<&Path>,
    tokenizer: Option<&Path>,
    split_name: SplitName,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = LoadedConfig::load(config)?;
    let tok_dir = cfg.stage_dir(tokenizer, "tokenizer");
    let ckpt = cfg.stage_dir(checkpoint, &format!("finetune-{}", task.name()));
    let out = cfg.stage_dir(out, &format!("evaluate-{}", task.name()));
    let tok = load_tokenizer(&tok_dir)?;
    let (model, desc) = load_checkpoint(&ckpt)?;
    if desc.tokenizer_fingerprint != tok.fingerprint() {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained with tokenizer {}, but {} was given",
            ckpt.display(),
            desc.tokenizer_fingerprint,
            tok.fingerprint()
        )));
    }
    if let Some(t) = checkpoint_task(&desc) {
        if t != task {
            return Err(CliError::TaskHead(format!(
                "checkpoint was fine-tuned for {}, not {}",
                t.name(),
                task.name()
            )));
        }
    }
    let (data, mut inputs) = load_task_data(task, &cfg, &tok)?;
    let examples = match split_name {
        SplitName::Train => &data.train,
        SplitName::Validation => &data.validation,
        SplitName::Test => &data.test,
    };
    let metrics = evaluate(&model, &data, examples)?;
    create_dir(&out)?;
    let table = render_metrics(&metrics);
    write(&out.join("report.tsv"), &table)?;
    write(
        &out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n",
    )?;
    inputs.push(ckpt.join(crate::model::CHECKPOINT_WEIGHTS_FILE));
    write_provenance(&out, "evaluate", &cfg, &inputs, Some(tok.fingerprint()))?;
    print!("{table}");
    Ok(())
}

fn read_run_results(path: &Path) -> Result<Vec<RunResult>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, e: serde_json::Error| CliError::Config {
        path: path.to_path_buf(),
        reason: format!("line {line}: {e}"),
    };
    if let Ok(single) = serde_json::from_str::<RunResult>(&text) {
        return Ok(vec![single]);
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| bad(i + 1, e))?);
    }
    Ok(out)
}

/// Results table with one `mean (std)` cell per metric and split, in
/// percent: one decimal for NER, two for classification.
pub fn render_aggregate(agg: &SeedAggregate) -> String {
    let decimals = if agg.task == Task::Ner { 1 } else { 2 };
    let pct = |m: crate::training::MeanStd| crate::training::MeanStd {
        mean: 100.0 * m.mean,
        std: 100.0 * m.std,
    };
    let order = |map: &BTreeMap<String, crate::training::MeanStd>| -> Vec<String> {
        let mut keys: Vec<String> = map.keys().cloned().collect();
        let rank = |k: &str| match k {
            "micro" => 1,
            "macro" => 2,
            "weighted" => 3,
            "precision" => 0,
            "recall" => 1,
            "f1" => 2,
            _ => 0,
        };
        keys.sort_by(|a, b| rank(a).cmp(&rank(b)).then(a.cmp(b)));
        keys
    };
    let keys = order(&agg.test);
    let mut out = String::from("split");
    for k in &keys {
        let _ = write!(out, "\t{}", type_abbreviation(k));
    }
    out.push('\n');
    for (name, map) in [("validation", &agg.validation), ("test", &agg.test)] {
        out.push_str(name);
        for k in &keys {
            let _ = write!(out, "\t{}", format_mean_std(pct(map[k]), decimals));
        }
        out.push('\n');
    }
    out
}

pub fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut results = Vec::new();
    for p in runs {
        results.extend(read_run_results(p)?);
    }
    let agg = aggregate_seeds(&results)?;
    let table = render_aggregate(&agg);
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join("report.tsv"), &table)?;
        write(&out.join("results.tsv"), render_results_table(&results))?;
        write(
            &out.join("aggregate.json"),
            serde_json::to_string_pretty(&agg).expect("aggregate serializes") + "\n",
        )?;
    }
    print!("{table}");
    Ok(())
}
