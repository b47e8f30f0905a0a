//! Dataset ingestion: pretraining manifests, IOB-tagged NER files, the
//! volume/chapter/subject classification data, deterministic splits and
//! sequence packing.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textnorm::{DeclaredEncoding, RawDocument};
use crate::tokenizer::{SpecialTokens, TokenId};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: unknown entity type `{entity_type}`")]
    UnknownEntityType {
        path: PathBuf,
        line: usize,
        entity_type: String,
    },
    #[error("{path}:{line}: `{tag}` does not continue an entity of the same type")]
    DanglingInside { path: PathBuf, line: usize, tag: String },
    #[error("record {index}: {reason}")]
    Hierarchy { index: usize, reason: String },
    #[error("manifest lists {path} more than once")]
    DuplicatePath { path: PathBuf },
    #[error("{path}: document is empty")]
    EmptyDocument { path: PathBuf },
    #[error("{path}: manifest declares {declared} bytes, file has {actual}")]
    SizeMismatch {
        path: PathBuf,
        declared: u64,
        actual: u64,
    },
    #[error("split fractions must be non-negative and sum to 1 (got {0})")]
    BadSplit(f64),
    #[error("need at least 3 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("max_len must be at least 3, got {0}")]
    MaxLenTooSmall(usize),
    #[error("entity type set must be non-empty with unique, non-empty labels")]
    BadTypeSet,
    #[error("sentence has {tokens} tokens but {tags} tags")]
    LengthMismatch { tokens: usize, tags: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Pretraining manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    Legal,
    Nonlegal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Corpus name (e.g. "nomothesia").
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub encoding: DeclaredEncoding,
    pub context: Context,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<u64>,
}

/// Line-delimited JSON list of pretraining documents. Relative paths are
/// resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, base_dir)
    }

    pub fn parse(text: &str, origin: &Path, base_dir: PathBuf) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if !seen.insert(entry.path.clone()) {
                return Err(CorpusError::DuplicatePath { path: entry.path });
            }
            entries.push(entry);
        }
        Ok(CorpusManifest { entries, base_dir })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// Reads every listed file. Missing, empty or size-mismatched files are
    /// errors.
    pub fn read_documents(&self) -> Result<Vec<RawDocument>, CorpusError> {
        self.entries
            .iter()
            .map(|e| {
                let path = self.resolve(e);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                if bytes.is_empty() {
                    return Err(CorpusError::EmptyDocument { path });
                }
                if let Some(declared) = e.size_bytes {
                    if declared != bytes.len() as u64 {
                        return Err(CorpusError::SizeMismatch {
                            path,
                            declared,
                            actual: bytes.len() as u64,
                        });
                    }
                }
                Ok(RawDocument {
                    bytes,
                    declared_encoding: e.encoding,
                    source_id: e.path.to_string_lossy().into_owned(),
                })
            })
            .collect()
    }

    /// Total declared bytes per context, mirroring a corpus statistics table.
    pub fn size_by_context(&self) -> HashMap<Context, u64> {
        let mut out = HashMap::new();
        for e in &self.entries {
            *out.entry(e.context).or_default() += e.size_bytes.unwrap_or(0);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// NER data

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct EntityTypeSet {
    types: Vec<String>,
}

impl Default for EntityTypeSet {
    fn default() -> Self {
        EntityTypeSet {
            types: [
                "FACILITY", "GPE", "LEG-REF", "LOC-NAT", "LOC-UNK", "ORG", "PERSON", "PUBLIC-DOC",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl TryFrom<Vec<String>> for EntityTypeSet {
    type Error = CorpusError;

    fn try_from(types: Vec<String>) -> Result<Self, Self::Error> {
        EntityTypeSet::new(types)
    }
}

impl From<EntityTypeSet> for Vec<String> {
    fn from(s: EntityTypeSet) -> Self {
        s.types
    }
}

impl EntityTypeSet {
    pub fn new(types: Vec<String>) -> Result<Self, CorpusError> {
        let unique: HashSet<&String> = types.iter().collect();
        if types.is_empty() || unique.len() != types.len() || types.iter().any(|t| t.is_empty()) {
            return Err(CorpusError::BadTypeSet);
        }
        Ok(EntityTypeSet { types })
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn index_of(&self, t: &str) -> Option<usize> {
        self.types.iter().position(|x| x == t)
    }

    /// Number of IOB tags: `O` plus `B-`/`I-` for each type.
    pub fn num_tags(&self) -> usize {
        1 + 2 * self.types.len()
    }

    pub fn tag_index(&self, tag: &Tag) -> Option<usize> {
        match tag {
            Tag::Outside => Some(0),
            Tag::Begin(t) => self.index_of(t).map(|i| 1 + 2 * i),
            Tag::Inside(t) => self.index_of(t).map(|i| 2 + 2 * i),
        }
    }

    pub fn tag_at(&self, index: usize) -> Option<Tag> {
        if index == 0 {
            return Some(Tag::Outside);
        }
        let t = self.types.get((index - 1) / 2)?.clone();
        Some(if index % 2 == 1 { Tag::Begin(t) } else { Tag::Inside(t) })
    }
}

/// One IOB tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl Tag {
    pub fn entity_type(&self) -> Option<&str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        match s.split_once('-') {
            Some(("B", t)) if !t.is_empty() => Ok(Tag::Begin(t.to_string())),
            Some(("I", t)) if !t.is_empty() => Ok(Tag::Inside(t.to_string())),
            _ => Err(format!("malformed tag `{s}`")),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(t) => write!(f, "B-{t}"),
            Tag::Inside(t) => write!(f, "I-{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NerSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
}

impl NerSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>) -> Result<Self, CorpusError> {
        if tokens.len() != tags.len() || tokens.is_empty() {
            return Err(CorpusError::LengthMismatch {
                tokens: tokens.len(),
                tags: tags.len(),
            });
        }
        Ok(NerSentence { tokens, tags })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Index of the first `I-X` that does not continue a `B-X`/`I-X`.
pub fn first_dangling_inside(tags: &[Tag]) -> Option<usize> {
    let mut prev: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        if let Tag::Inside(t) = tag {
            if prev != Some(t.as_str()) {
                return Some(i);
            }
        }
        prev = tag.entity_type();
    }
    None
}

/// Rewrites every `I-X` not preceded by `B-X` or `I-X` to `B-X`.
pub fn repair_tags(tags: &mut [Tag]) {
    let mut prev: Option<String> = None;
    for tag in tags.iter_mut() {
        if let Tag::Inside(t) = tag {
            if prev.as_deref() != Some(t.as_str()) {
                *tag = Tag::Begin(std::mem::take(t));
            }
        }
        prev = tag.entity_type().map(str::to_string);
    }
}

/// Parses `<token>\t<tag>` lines with blank-line sentence separators.
pub fn parse_iob(
    text: &str,
    origin: &Path,
    types: &EntityTypeSet,
    repair: bool,
) -> Result<Vec<NerSentence>, CorpusError> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut first_line = 0;

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<Tag>, first_line: usize| -> Result<(), CorpusError> {
        if tokens.is_empty() {
            return Ok(());
        }
        if repair {
            repair_tags(tags);
        } else if let Some(i) = first_dangling_inside(tags) {
            return Err(CorpusError::DanglingInside {
                path: origin.to_path_buf(),
                line: first_line + i,
                tag: tags[i].to_string(),
            });
        }
        sentences.push(NerSentence::new(std::mem::take(tokens), std::mem::take(tags))?);
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, first_line)?;
            continue;
        }
        let parse_err = |reason: String| CorpusError::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            reason,
        };
        let (token, tag) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `<token>\\t<tag>`".into()))?;
        if token.is_empty() || tag.contains('\t') {
            return Err(parse_err("expected exactly one token and one tag".into()));
        }
        let tag: Tag = tag.trim().parse().map_err(parse_err)?;
        if let Some(t) = tag.entity_type() {
            if types.index_of(t).is_none() {
                return Err(CorpusError::UnknownEntityType {
                    path: origin.to_path_buf(),
                    line: line_no,
                    entity_type: t.to_string(),
                });
            }
        }
        if tokens.is_empty() {
            first_line = line_no;
        }
        tokens.push(token.to_string());
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags, first_line)?;
    Ok(sentences)
}

pub fn load_iob(path: &Path, types: &EntityTypeSet, repair: bool) -> Result<Vec<NerSentence>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_iob(&text, path, types, repair)
}

pub fn serialize_iob(sentences: &[NerSentence]) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&tag.to_string());
            out.push('\n');
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Classification data

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Volume,
    Chapter,
    Subject,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Volume, Level::Chapter, Level::Subject];

    pub fn name(self) -> &'static str {
        match self {
            Level::Volume => "volume",
            Level::Chapter => "chapter",
            Level::Subject => "subject",
        }
    }
}

/// Volume → chapter → subject tree. Chapter and subject labels are unique
/// across the whole hierarchy.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelHierarchy {
    volumes: Vec<String>,
    chapters: Vec<String>,
    subjects: Vec<String>,
    chapter_parent: Vec<usize>,
    subject_parent: Vec<usize>,
    index: [HashMap<String, usize>; 3],
}

impl LabelHierarchy {
    /// Builds the tree from `(volume, chapter, subject)` triples. Ids are
    /// assigned in order of first appearance.
    pub fn from_triples<'a, I>(triples: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut h = LabelHierarchy::default();
        for (i, (v, c, s)) in triples.into_iter().enumerate() {
            let vid = h.intern(Level::Volume, v);
            let cid = h.intern(Level::Chapter, c);
            if cid == h.chapter_parent.len() {
                h.chapter_parent.push(vid);
            } else if h.chapter_parent[cid] != vid {
                return Err(CorpusError::Hierarchy {
                    index: i,
                    reason: format!("chapter `{c}` appears under two volumes"),
                });
            }
            let sid = h.intern(Level::Subject, s);
            if sid == h.subject_parent.len() {
                h.subject_parent.push(cid);
            } else if h.subject_parent[sid] != cid {
                return Err(CorpusError::Hierarchy {
                    index: i,
                    reason: format!("subject `{s}` appears under two chapters"),
                });
            }
        }
        Ok(h)
    }

    fn intern(&mut self, level: Level, label: &str) -> usize {
        let slot = level as usize;
        if let Some(&id) = self.index[slot].get(label) {
            return id;
        }
        let labels = match level {
            Level::Volume => &mut self.volumes,
            Level::Chapter => &mut self.chapters,
            Level::Subject => &mut self.subjects,
        };
        labels.push(label.to_string());
        let id = labels.len() - 1;
        self.index[slot].insert(label.to_string(), id);
        id
    }

    /// Parses `volume\tchapter\tsubject` lines.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut triples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
                return Err(CorpusError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: "expected `volume\\tchapter\\tsubject`".into(),
                });
            }
            triples.push((parts[0], parts[1], parts[2]));
        }
        Self::from_triples(triples)
    }

    pub fn labels(&self, level: Level) -> &[String] {
        match level {
            Level::Volume => &self.volumes,
            Level::Chapter => &self.chapters,
            Level::Subject => &self.subjects,
        }
    }

    pub fn id(&self, level: Level, label: &str) -> Option<usize> {
        self.index[level as usize].get(label).copied()
    }

    pub fn parent_of_chapter(&self, chapter: usize) -> Option<usize> {
        self.chapter_parent.get(chapter).copied()
    }

    pub fn parent_of_subject(&self, subject: usize) -> Option<usize> {
        self.subject_parent.get(subject).copied()
    }

    pub fn num_labels(&self, level: Level) -> usize {
        self.labels(level).len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationRecord {
    pub text: String,
    pub volume: usize,
    pub chapter: usize,
    pub subject: usize,
}

impl ClassificationRecord {
    pub fn label(&self, level: Level) -> usize {
        match level {
            Level::Volume => self.volume,
            Level::Chapter => self.chapter,
            Level::Subject => self.subject,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClassificationRecord {
    text: String,
    volume: String,
    chapter: String,
    subject: String,
}

/// Resolves labels and checks that the chapter lies under the volume and
/// the subject under the chapter.
pub fn resolve_record(
    index: usize,
    text: String,
    labels: (&str, &str, &str),
    hierarchy: &LabelHierarchy,
) -> Result<ClassificationRecord, CorpusError> {
    let err = |reason: String| CorpusError::Hierarchy { index, reason };
    let (v, c, s) = labels;
    let volume = hierarchy
        .id(Level::Volume, v)
        .ok_or_else(|| err(format!("unknown volume `{v}`")))?;
    let chapter = hierarchy
        .id(Level::Chapter, c)
        .ok_or_else(|| err(format!("unknown chapter `{c}`")))?;
    let subject = hierarchy
        .id(Level::Subject, s)
        .ok_or_else(|| err(format!("unknown subject `{s}`")))?;
    if hierarchy.parent_of_chapter(chapter) != Some(volume) {
        return Err(err(format!("chapter `{c}` is not under volume `{v}`")));
    }
    if hierarchy.parent_of_subject(subject) != Some(chapter) {
        return Err(err(format!("subject `{s}` is not under chapter `{c}`")));
    }
    Ok(ClassificationRecord {
        text,
        volume,
        chapter,
        subject,
    })
}

/// Loads line-delimited JSON records `{text, volume, chapter, subject}`.
pub fn load_classification(
    path: &Path,
    hierarchy: &LabelHierarchy,
) -> Result<Vec<ClassificationRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawClassificationRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let index = out.len();
        out.push(resolve_record(
            index,
            raw.text,
            (&raw.volume, &raw.chapter, &raw.subject),
            hierarchy,
        )?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.675,
            val_frac: 0.175,
            test_frac: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let sum = self.train_frac + self.val_frac + self.test_frac;
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if (sum - 1.0).abs() > 1e-9 || fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(CorpusError::BadSplit(sum));
        }
        Ok(())
    }

    /// Partition sizes for `n` records: validation and test are floored,
    /// the remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // The epsilon absorbs representation error in products such as
        // 0.175 * 1000.
        let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let val = floor(self.val_frac);
        let test = floor(self.test_frac);
        (n - val - test, val, test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle followed by a train/validation/test cut.
pub fn split<T>(mut records: Vec<T>, spec: &SplitSpec) -> Result<Splits<T>, CorpusError> {
    spec.validate()?;
    if records.len() < 3 {
        return Err(CorpusError::TooFewRecords(records.len()));
    }
    let (n_train, n_val, _) = spec.sizes(records.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    records.shuffle(&mut rng);
    let mut rest = records.split_off(n_train);
    let test = rest.split_off(n_val);
    Ok(Splits {
        train: records,
        val: rest,
        test,
    })
}

// ---------------------------------------------------------------------------
// Packing

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub ids: Vec<TokenId>,
    /// 1 for real (including separator) positions, 0 for padding.
    pub attention_mask: Vec<u8>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Packed pretraining data tied to the tokenizer that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCorpus {
    pub sequences: Vec<PackedSequence>,
    pub max_len: usize,
    pub tokenizer_fingerprint: String,
}

/// Greedily packs documents into `max_len` sequences.
///
/// Each document is wrapped as `<s> … </s>` and appended to the current
/// sequence if it fits whole, otherwise it opens a new one. A document
/// longer than `max_len - 2` is cut into `max_len - 2` token chunks first.
/// The trailing partial sequence is padded. Empty documents are dropped.
pub fn pack_sequences<I>(
    docs: I,
    max_len: usize,
    specials: &SpecialTokens,
) -> Result<Vec<PackedSequence>, CorpusError>
where
    I: IntoIterator,
    I::Item: AsRef<[TokenId]>,
{
    if max_len < 3 {
        return Err(CorpusError::MaxLenTooSmall(max_len));
    }
    let (bos, eos, pad) = (specials.bos.id, specials.eos.id, specials.pad.id);
    let mut out = Vec::new();
    let mut current: Vec<TokenId> = Vec::with_capacity(max_len);

    let mut finish = |current: &mut Vec<TokenId>| {
        if current.is_empty() {
            return;
        }
        let real = current.len();
        let mut ids = std::mem::replace(current, Vec::with_capacity(max_len));
        ids.resize(max_len, pad);
        let mut attention_mask = vec![1u8; real];
        attention_mask.resize(max_len, 0);
        out.push(PackedSequence { ids, attention_mask });
    };

    for doc in docs {
        for chunk in doc.as_ref().chunks(max_len - 2) {
            if current.len() + chunk.len() + 2 > max_len {
                finish(&mut current);
            }
            current.push(bos);
            current.extend_from_slice(chunk);
            current.push(eos);
        }
    }
    finish(&mut current);
    Ok(out)
}
