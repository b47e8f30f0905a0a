//! Byte-level byte-pair encoding.
//!
//! Id layout of a trained model with `m` merges:
//!
//! ```text
//! 0 <s>   1 <pad>   2 </s>   3 <unk>   4..260 bytes 0x00..0xFF
//! 260..260+m merges in priority order   260+m <mask>
//! ```
//!
//! Text is pre-tokenized by cutting before every whitespace character, so
//! a word carries its leading space (`" νομος"`) and decoding is exact.
//! Token strings use the usual printable byte-to-char mapping (space is
//! rendered as `Ġ`), which keeps vocabulary files free of whitespace.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MERGES_FILE: &str = "merges.txt";

/// Vocabulary size of the production configuration (specials included).
pub const PRODUCTION_VOCAB_SIZE: usize = 50_264;

const NUM_LEADING_SPECIALS: u32 = 4;
const BYTE_OFFSET: u32 = NUM_LEADING_SPECIALS;
const FIRST_MERGE_ID: u32 = BYTE_OFFSET + 256;

/// Smallest valid vocabulary: byte alphabet plus the five specials.
pub const MIN_VOCAB_SIZE: usize = 256 + 5;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocabulary size {target} is below the minimum {min}")]
    VocabTooSmall { target: usize, min: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("token id {id} at position {position} is out of range for vocabulary of {vocab_size}")]
    IdOutOfRange {
        position: usize,
        id: TokenId,
        vocab_size: usize,
    },
    #[error("special token strings must be distinct and non-empty")]
    BadSpecials,
    #[error("malformed tokenizer file {file} at line {line}: {reason}")]
    Format {
        file: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialToken {
    pub token: String,
    pub id: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokens {
    pub bos: SpecialToken,
    pub eos: SpecialToken,
    pub pad: SpecialToken,
    pub unk: SpecialToken,
    pub mask: SpecialToken,
}

impl SpecialTokens {
    pub fn ids(&self) -> [TokenId; 5] {
        [self.bos.id, self.pad.id, self.eos.id, self.unk.id, self.mask.id]
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.ids().contains(&id)
    }
}

/// Literal strings for the special tokens; ids are fixed by the layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecialTokenNames {
    pub bos: String,
    pub pad: String,
    pub eos: String,
    pub unk: String,
    pub mask: String,
}

impl Default for SpecialTokenNames {
    fn default() -> Self {
        SpecialTokenNames {
            bos: "<s>".into(),
            pad: "<pad>".into(),
            eos: "</s>".into(),
            unk: "<unk>".into(),
            mask: "<mask>".into(),
        }
    }
}

impl SpecialTokenNames {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        let all = [&self.bos, &self.pad, &self.eos, &self.unk, &self.mask];
        let distinct: HashSet<&String> = all.iter().copied().collect();
        if distinct.len() != 5 || all.iter().any(|s| s.is_empty() || s.chars().any(char::is_whitespace)) {
            return Err(TokenizerError::BadSpecials);
        }
        Ok(())
    }
}

/// Printable stand-ins for the 256 byte values.
fn byte_chars() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let mut extra = 0u32;
        for b in 0..=255u8 {
            let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
            table[b as usize] = if printable {
                b as char
            } else {
                let c = char::from_u32(256 + extra).unwrap();
                extra += 1;
                c
            };
        }
        table
    })
}

fn bytes_to_token_string(bytes: &[u8]) -> String {
    let table = byte_chars();
    bytes.iter().map(|&b| table[b as usize]).collect()
}

/// Splits `text` before every whitespace character. Returns byte ranges
/// that partition `text`.
pub fn pretokenize(text: &str) -> Vec<(usize, usize)> {
    let mut pieces = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if i > start && c.is_whitespace() {
            pieces.push((start, i));
            start = i;
        }
    }
    if start < text.len() {
        pieces.push((start, text.len()));
    }
    pieces
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Byte range of each token in the source text.
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    tokens: Vec<String>,
    vocab: HashMap<String, TokenId>,
    token_bytes: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    merge_ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    specials: SpecialTokens,
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainReport {
    pub target_vocab_size: usize,
    pub actual_vocab_size: usize,
    pub merges: usize,
    /// Candidate pairs skipped because their concatenation already existed
    /// as a token.
    pub skipped_duplicates: usize,
}

impl TrainReport {
    pub fn exhausted(&self) -> bool {
        self.actual_vocab_size < self.target_vocab_size
    }
}

impl TokenizerModel {
    fn from_merges(
        names: &SpecialTokenNames,
        merges: Vec<(TokenId, TokenId)>,
    ) -> Result<Self, TokenizerError> {
        names.validate()?;
        let mut tokens: Vec<String> = vec![
            names.bos.clone(),
            names.pad.clone(),
            names.eos.clone(),
            names.unk.clone(),
        ];
        let mut token_bytes: Vec<Vec<u8>> = tokens.iter().map(|t| t.as_bytes().to_vec()).collect();
        for b in 0..=255u8 {
            tokens.push(bytes_to_token_string(&[b]));
            token_bytes.push(vec![b]);
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let id = FIRST_MERGE_ID + rank as TokenId;
            if l >= id || r >= id || l < BYTE_OFFSET || r < BYTE_OFFSET {
                return Err(TokenizerError::Format {
                    file: MERGES_FILE.into(),
                    line: rank + 2,
                    reason: format!("merge ({l}, {r}) references an unavailable token"),
                });
            }
            let s = format!("{}{}", tokens[l as usize], tokens[r as usize]);
            let mut bytes = token_bytes[l as usize].clone();
            bytes.extend_from_slice(&token_bytes[r as usize]);
            tokens.push(s);
            token_bytes.push(bytes);
            merge_ranks.insert((l, r), (rank, id));
        }
        let mask_id = tokens.len() as TokenId;
        tokens.push(names.mask.clone());
        token_bytes.push(names.mask.as_bytes().to_vec());

        let mut vocab = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if vocab.insert(t.clone(), id as TokenId).is_some() {
                return Err(TokenizerError::Format {
                    file: VOCAB_FILE.into(),
                    line: id + 2,
                    reason: format!("duplicate token `{t}`"),
                });
            }
        }
        let specials = SpecialTokens {
            bos: SpecialToken { token: names.bos.clone(), id: 0 },
            pad: SpecialToken { token: names.pad.clone(), id: 1 },
            eos: SpecialToken { token: names.eos.clone(), id: 2 },
            unk: SpecialToken { token: names.unk.clone(), id: 3 },
            mask: SpecialToken { token: names.mask.clone(), id: mask_id },
        };
        Ok(TokenizerModel {
            tokens,
            vocab,
            token_bytes,
            merges,
            merge_ranks,
            specials,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_to_id(&self, token: &str) -> Option<TokenId> {
        self.vocab.get(token).copied()
    }

    pub fn id_to_token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of the single-byte token for `b`.
    pub fn byte_id(b: u8) -> TokenId {
        BYTE_OFFSET + b as TokenId
    }

    /// Range of ids that are neither specials nor reserved.
    pub fn regular_ids(&self) -> std::ops::Range<TokenId> {
        BYTE_OFFSET..self.specials.mask.id
    }

    fn merge_piece(&self, piece: &[u8], start: usize) -> impl Iterator<Item = (TokenId, (usize, usize))> {
        let mut syms: Vec<(TokenId, usize, usize)> = piece
            .iter()
            .enumerate()
            .map(|(i, &b)| (Self::byte_id(b), start + i, start + i + 1))
            .collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0].0, w[1].0)).copied())
                .min_by_key(|&(rank, _)| rank);
            let Some((rank, new_id)) = best else { break };
            let (l, r) = self.merges[rank];
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i].0 == l && syms[i + 1].0 == r {
                    merged.push((new_id, syms[i].1, syms[i + 1].2));
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        syms.into_iter().map(|(id, s, e)| (id, (s, e)))
    }

    /// Encodes already-normalized text.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        let bytes = text.as_bytes();
        for (s, e) in pretokenize(text) {
            for (id, off) in self.merge_piece(&bytes[s..e], s) {
                seq.ids.push(id);
                seq.offsets.push(off);
            }
        }
        seq
    }

    /// Inverse of [`encode`](Self::encode). Specials render as their
    /// literal strings unless `skip_specials` is set.
    pub fn decode(&self, ids: &[TokenId], skip_specials: bool) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for (position, &id) in ids.iter().enumerate() {
            let Some(tb) = self.token_bytes.get(id as usize) else {
                return Err(TokenizerError::IdOutOfRange {
                    position,
                    id,
                    vocab_size: self.vocab_size(),
                });
            };
            if skip_specials && self.specials.is_special(id) {
                continue;
            }
            bytes.extend_from_slice(tb);
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    fn header(&self) -> String {
        let s = &self.specials;
        format!(
            "#nomos-bpe version={FORMAT_VERSION} bos={} pad={} eos={} unk={} mask={}",
            s.bos.id, s.pad.id, s.eos.id, s.unk.id, s.mask.id
        )
    }

    pub fn vocab_file_contents(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for (id, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{id}");
        }
        out
    }

    pub fn merges_file_contents(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for &(l, r) in &self.merges {
            let _ = writeln!(out, "{} {}", self.tokens[l as usize], self.tokens[r as usize]);
        }
        out
    }

    /// Stable hash over the serialized vocabulary and merges.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab_file_contents().as_bytes());
        h.update(self.merges_file_contents().as_bytes());
        hex::encode(&h.finalize()[..8])
    }

    pub fn save(&self, dir: &Path) -> Result<(), TokenizerError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(VOCAB_FILE), self.vocab_file_contents())?;
        fs::write(dir.join(MERGES_FILE), self.merges_file_contents())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TokenizerError> {
        let vocab = fs::read_to_string(dir.join(VOCAB_FILE))?;
        let merges = fs::read_to_string(dir.join(MERGES_FILE))?;
        Self::from_files(&vocab, &merges)
    }

    pub fn from_files(vocab_text: &str, merges_text: &str) -> Result<Self, TokenizerError> {
        let fmt_err = |file: &str, line: usize, reason: String| TokenizerError::Format {
            file: file.into(),
            line,
            reason,
        };
        let mut vlines = vocab_text.lines();
        let header = vlines.next().ok_or_else(|| fmt_err(VOCAB_FILE, 1, "empty file".into()))?;
        let header_ids = parse_header(header).map_err(|r| fmt_err(VOCAB_FILE, 1, r))?;
        let mut tokens: Vec<String> = Vec::new();
        for (i, line) in vlines.enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| fmt_err(VOCAB_FILE, i + 2, "expected `<token>\\t<id>`".into()))?;
            let id: usize = id
                .parse()
                .map_err(|_| fmt_err(VOCAB_FILE, i + 2, format!("bad id `{id}`")))?;
            if id != tokens.len() {
                return Err(fmt_err(VOCAB_FILE, i + 2, format!("expected id {}, found {id}", tokens.len())));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < MIN_VOCAB_SIZE {
            return Err(fmt_err(VOCAB_FILE, 1, "vocabulary smaller than the byte alphabet".into()));
        }
        let mask_id = tokens.len() - 1;
        if header_ids != [0, 1, 2, 3, mask_id] {
            return Err(fmt_err(VOCAB_FILE, 1, "special ids do not match the fixed layout".into()));
        }
        let names = SpecialTokenNames {
            bos: tokens[0].clone(),
            pad: tokens[1].clone(),
            eos: tokens[2].clone(),
            unk: tokens[3].clone(),
            mask: tokens[mask_id].clone(),
        };
        let lookup: HashMap<&str, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as TokenId))
            .collect();

        let mut mlines = merges_text.lines();
        let mheader = mlines.next().ok_or_else(|| fmt_err(MERGES_FILE, 1, "empty file".into()))?;
        if parse_header(mheader).map_err(|r| fmt_err(MERGES_FILE, 1, r))? != header_ids {
            return Err(fmt_err(MERGES_FILE, 1, "header disagrees with vocabulary".into()));
        }
        let mut merges = Vec::new();
        for (i, line) in mlines.enumerate() {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| fmt_err(MERGES_FILE, i + 2, "expected `<left> <right>`".into()))?;
            let id_of = |t: &str| {
                lookup
                    .get(t)
                    .copied()
                    .ok_or_else(|| fmt_err(MERGES_FILE, i + 2, format!("unknown token `{t}`")))
            };
            merges.push((id_of(l)?, id_of(r)?));
        }
        let model = Self::from_merges(&names, merges)?;
        if model.tokens != tokens {
            return Err(fmt_err(VOCAB_FILE, 1, "vocabulary does not match the merge list".into()));
        }
        Ok(model)
    }
}

fn parse_header(line: &str) -> Result<[usize; 5], String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#nomos-bpe") {
        return Err("missing `#nomos-bpe` header".into());
    }
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| format!("bad header field `{p}`"))?;
        fields.insert(k, v);
    }
    if fields.get("version") != Some(&FORMAT_VERSION.to_string().as_str()) {
        return Err("unsupported format version".into());
    }
    let mut out = [0usize; 5];
    for (slot, key) in out.iter_mut().zip(["bos", "pad", "eos", "unk", "mask"]) {
        *slot = fields
            .get(key)
            .ok_or_else(|| format!("missing `{key}`"))?
            .parse()
            .map_err(|_| format!("bad `{key}`"))?;
    }
    Ok(out)
}

type Pair = (TokenId, TokenId);

struct Word {
    symbols: Vec<TokenId>,
    freq: i64,
}

impl Word {
    fn pairs(&self) -> impl Iterator<Item = Pair> + '_ {
        self.symbols.windows(2).map(|w| (w[0], w[1]))
    }

    /// Replaces non-overlapping occurrences of `pair`, left to right.
    fn merge(&mut self, pair: Pair, new_id: TokenId) -> bool {
        let mut out = Vec::with_capacity(self.symbols.len());
        let mut i = 0;
        let mut changed = false;
        while i < self.symbols.len() {
            if i + 1 < self.symbols.len() && (self.symbols[i], self.symbols[i + 1]) == pair {
                out.push(new_id);
                i += 2;
                changed = true;
            } else {
                out.push(self.symbols[i]);
                i += 1;
            }
        }
        self.symbols = out;
        changed
    }
}

fn count_pieces<S: AsRef<str> + Sync>(corpus: &[S]) -> Vec<(Vec<u8>, i64)> {
    let counts = corpus
        .par_iter()
        .fold(HashMap::<&[u8], i64>::new, |mut acc, doc| {
            let text = doc.as_ref();
            for (s, e) in pretokenize(text) {
                *acc.entry(&text.as_bytes()[s..e]).or_default() += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        });
    let mut pieces: Vec<(Vec<u8>, i64)> = counts.into_iter().map(|(k, v)| (k.to_vec(), v)).collect();
    pieces.sort_unstable();
    pieces
}

/// Learns a byte-level BPE model over normalized documents.
///
/// The most frequent adjacent pair is merged until the vocabulary reaches
/// `target_vocab_size` (specials included). Frequency ties go to the
/// smallest `(left id, right id)`. A pair whose concatenation already
/// exists as a token is never merged. If the corpus runs out of pairs the
/// smaller vocabulary is returned and the shortfall is reported.
pub fn train_bpe<S: AsRef<str> + Sync>(
    corpus: &[S],
    target_vocab_size: usize,
    names: &SpecialTokenNames,
) -> Result<(TokenizerModel, TrainReport), TokenizerError> {
    names.validate()?;
    if target_vocab_size < MIN_VOCAB_SIZE {
        return Err(TokenizerError::VocabTooSmall {
            target: target_vocab_size,
            min: MIN_VOCAB_SIZE,
        });
    }
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let budget = target_vocab_size - MIN_VOCAB_SIZE;

    let mut words: Vec<Word> = count_pieces(corpus)
        .into_iter()
        .map(|(bytes, freq)| Word {
            symbols: bytes.iter().map(|&b| TokenizerModel::byte_id(b)).collect(),
            freq,
        })
        .collect();

    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    let mut occurrences: HashMap<Pair, Vec<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.pairs() {
            *pair_counts.entry(p).or_default() += w.freq;
            let occ = occurrences.entry(p).or_default();
            if occ.last() != Some(&wi) {
                occ.push(wi);
            }
        }
    }

    // Token strings, used to reject merges that would duplicate a token.
    let mut strings: Vec<String> = vec![
        names.bos.clone(),
        names.pad.clone(),
        names.eos.clone(),
        names.unk.clone(),
    ];
    strings.extend((0..=255u8).map(|b| bytes_to_token_string(&[b])));
    let mut known: HashSet<String> = strings.iter().cloned().collect();
    known.insert(names.mask.clone());

    let mut heap: BinaryHeap<(i64, Reverse<Pair>)> =
        pair_counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();
    let mut merges: Vec<Pair> = Vec::with_capacity(budget);
    let mut skipped = 0;
    let mut forbidden: HashSet<Pair> = HashSet::new();

    while merges.len() < budget {
        let Some((count, Reverse(pair))) = heap.pop() else { break };
        let current = pair_counts.get(&pair).copied().unwrap_or(0);
        if current <= 0 {
            continue;
        }
        if current != count {
            heap.push((current, Reverse(pair)));
            continue;
        }
        let merged = format!("{}{}", strings[pair.0 as usize], strings[pair.1 as usize]);
        if known.contains(&merged) {
            skipped += 1;
            forbidden.insert(pair);
            continue;
        }
        let new_id = FIRST_MERGE_ID + merges.len() as TokenId;
        known.insert(merged.clone());
        strings.push(merged);
        merges.push(pair);

        let affected = occurrences.remove(&pair).unwrap_or_default();
        let mut touched: HashSet<Pair> = HashSet::new();
        for wi in affected {
            let word = &mut words[wi];
            let before: Vec<Pair> = word.pairs().collect();
            if !word.merge(pair, new_id) {
                continue;
            }
            for p in before {
                *pair_counts.entry(p).or_default() -= word.freq;
                touched.insert(p);
            }
            for p in word.pairs().collect::<Vec<_>>() {
                *pair_counts.entry(p).or_default() += word.freq;
                touched.insert(p);
                let occ = occurrences.entry(p).or_default();
                if occ.last() != Some(&wi) {
                    occ.push(wi);
                }
            }
        }
        pair_counts.remove(&pair);
        let mut touched: Vec<Pair> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched.into_iter().filter(|p| !forbidden.contains(p)) {
            match pair_counts.get(&p).copied() {
                Some(c) if c > 0 => heap.push((c, Reverse(p))),
                Some(_) => {
                    pair_counts.remove(&p);
                }
                None => {}
            }
        }
    }

    let model = TokenizerModel::from_merges(names, merges)?;
    let report = TrainReport {
        target_vocab_size,
        actual_vocab_size: model.vocab_size(),
        merges: model.merges.len(),
        skipped_duplicates: skipped,
    };
    Ok((model, report))
}
