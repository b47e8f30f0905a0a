//! Canonicalization of raw Greek legal documents.
//!
//! Raw bytes arrive in one of three encodings (UTF-8, Windows-1253,
//! ISO 8859-7). They are transcoded to Unicode, decomposed with NFKD,
//! stripped of nonspacing marks, lowercased and whitespace-collapsed.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use encoding_rs::{DecoderResult, ISO_8859_7, UTF_8, WINDOWS_1253};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::char::decompose_compatible;
use unicode_normalization::UnicodeNormalization;

/// Fraction of replaced bytes above which a document is flagged.
pub const DEFAULT_CORRUPTION_THRESHOLD: f64 = 0.005;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NormError {
    #[error("strip_accents requires apply_nfkd")]
    StripWithoutDecomposition,
    #[error("unsupported encoding label `{0}`")]
    UnknownEncoding(String),
}

/// A supported character encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Encoding {
    #[serde(rename = "utf-8")]
    Utf8,
    #[serde(rename = "windows-1253")]
    Windows1253,
    #[serde(rename = "iso-8859-7")]
    Iso8859_7,
}

impl Encoding {
    pub fn label(self) -> &'static str {
        match self {
            Encoding::Utf8 => "utf-8",
            Encoding::Windows1253 => "windows-1253",
            Encoding::Iso8859_7 => "iso-8859-7",
        }
    }

    fn backend(self) -> &'static encoding_rs::Encoding {
        match self {
            Encoding::Utf8 => UTF_8,
            Encoding::Windows1253 => WINDOWS_1253,
            Encoding::Iso8859_7 => ISO_8859_7,
        }
    }

    /// Encodes `text` in a legacy single-byte encoding. Returns `None` if a
    /// character is not representable.
    pub fn encode_legacy(self, text: &str) -> Option<Vec<u8>> {
        let (bytes, _, had_errors) = self.backend().encode(text);
        (!had_errors).then(|| bytes.into_owned())
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Encoding label as it appears in manifests: one of the supported
/// encodings, or `unknown` (detected at load time).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DeclaredEncoding {
    Known(Encoding),
    #[default]
    Unknown,
}

impl FromStr for DeclaredEncoding {
    type Err = NormError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "utf-8" | "utf8" => Ok(Self::Known(Encoding::Utf8)),
            "windows-1253" | "cp1253" => Ok(Self::Known(Encoding::Windows1253)),
            "iso-8859-7" | "iso8859-7" => Ok(Self::Known(Encoding::Iso8859_7)),
            "unknown" | "" => Ok(Self::Unknown),
            other => Err(NormError::UnknownEncoding(other.to_string())),
        }
    }
}

impl fmt::Display for DeclaredEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Known(e) => e.fmt(f),
            Self::Unknown => f.write_str("unknown"),
        }
    }
}

impl Serialize for DeclaredEncoding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DeclaredEncoding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub bytes: Vec<u8>,
    pub declared_encoding: DeclaredEncoding,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "NormConfigFields", into = "NormConfigFields")]
pub struct NormConfig {
    apply_nfkd: bool,
    strip_accents: bool,
    lowercase: bool,
    collapse_whitespace: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct NormConfigFields {
    apply_nfkd: bool,
    strip_accents: bool,
    lowercase: bool,
    collapse_whitespace: bool,
}

impl Default for NormConfigFields {
    fn default() -> Self {
        let c = NormConfig::default();
        NormConfigFields {
            apply_nfkd: c.apply_nfkd,
            strip_accents: c.strip_accents,
            lowercase: c.lowercase,
            collapse_whitespace: c.collapse_whitespace,
        }
    }
}

impl TryFrom<NormConfigFields> for NormConfig {
    type Error = NormError;

    fn try_from(f: NormConfigFields) -> Result<Self, Self::Error> {
        NormConfig::new(f.apply_nfkd, f.strip_accents, f.lowercase, f.collapse_whitespace)
    }
}

impl From<NormConfig> for NormConfigFields {
    fn from(c: NormConfig) -> Self {
        NormConfigFields {
            apply_nfkd: c.apply_nfkd,
            strip_accents: c.strip_accents,
            lowercase: c.lowercase,
            collapse_whitespace: c.collapse_whitespace,
        }
    }
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            apply_nfkd: true,
            strip_accents: true,
            lowercase: true,
            collapse_whitespace: true,
        }
    }
}

impl NormConfig {
    pub fn new(
        apply_nfkd: bool,
        strip_accents: bool,
        lowercase: bool,
        collapse_whitespace: bool,
    ) -> Result<Self, NormError> {
        if strip_accents && !apply_nfkd {
            return Err(NormError::StripWithoutDecomposition);
        }
        Ok(NormConfig {
            apply_nfkd,
            strip_accents,
            lowercase,
            collapse_whitespace,
        })
    }

    pub fn apply_nfkd(&self) -> bool {
        self.apply_nfkd
    }

    pub fn strip_accents(&self) -> bool {
        self.strip_accents
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn collapse_whitespace(&self) -> bool {
        self.collapse_whitespace
    }

    /// Stable short hash identifying this configuration.
    pub fn fingerprint(&self) -> String {
        let canon = format!(
            "textnorm/v1;nfkd={};strip={};lower={};ws={}",
            self.apply_nfkd as u8,
            self.strip_accents as u8,
            self.lowercase as u8,
            self.collapse_whitespace as u8
        );
        let digest = Sha256::digest(canon.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedDocument {
    pub text: String,
    pub source_id: String,
    pub config_fingerprint: String,
}

/// Result of decoding a byte buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcoded {
    pub text: String,
    pub encoding: Encoding,
    /// Number of U+FFFD substitutions made for unmappable input.
    pub replacements: usize,
    pub byte_len: usize,
}

impl Transcoded {
    pub fn corruption_ratio(&self) -> f64 {
        if self.byte_len == 0 {
            0.0
        } else {
            self.replacements as f64 / self.byte_len as f64
        }
    }

    pub fn exceeds(&self, threshold: f64) -> bool {
        self.corruption_ratio() > threshold
    }
}

/// Byte values >= 0x80 where Windows-1253 and ISO 8859-7 decode differently.
fn disagreement_table() -> &'static [(u8, Option<char>, Option<char>)] {
    static TABLE: OnceLock<Vec<(u8, Option<char>, Option<char>)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0x80u8..=0xFF)
            .filter_map(|b| {
                let w = decode_single(Encoding::Windows1253, b);
                let i = decode_single(Encoding::Iso8859_7, b);
                (w != i).then_some((b, w, i))
            })
            .collect()
    })
}

fn decode_single(enc: Encoding, byte: u8) -> Option<char> {
    let t = transcode(&[byte], enc);
    if t.replacements > 0 {
        None
    } else {
        t.text.chars().next()
    }
}

/// Plausibility score of a decoded legacy byte: letters are strong
/// evidence, printable symbols weak evidence, controls and holes in the
/// code table count against the encoding.
fn plausibility(c: Option<char>) -> i64 {
    match c {
        None => -2,
        Some(c) if c.is_control() => -2,
        Some(c) if c.is_alphabetic() => 2,
        Some(_) => 1,
    }
}

/// Guesses the encoding of `bytes`.
///
/// Strict UTF-8 wins outright. Otherwise each byte falling in a position
/// where the two Greek code tables disagree is scored under both tables
/// (letter +2, other printable +1, control or unassigned -2); the higher
/// total wins and ties go to Windows-1253.
pub fn detect_encoding(bytes: &[u8]) -> Encoding {
    if std::str::from_utf8(bytes).is_ok() {
        return Encoding::Utf8;
    }
    let table = disagreement_table();
    let mut lookup: [Option<(i64, i64)>; 256] = [None; 256];
    for &(b, w, i) in table {
        lookup[b as usize] = Some((plausibility(w), plausibility(i)));
    }
    let (mut win, mut iso) = (0i64, 0i64);
    for &b in bytes {
        if let Some((w, i)) = lookup[b as usize] {
            win += w;
            iso += i;
        }
    }
    if iso > win {
        Encoding::Iso8859_7
    } else {
        Encoding::Windows1253
    }
}

/// Decodes `bytes` with the given encoding, substituting U+FFFD for each
/// malformed or unmapped sequence.
pub fn transcode(bytes: &[u8], encoding: Encoding) -> Transcoded {
    let mut decoder = encoding.backend().new_decoder_without_bom_handling();
    let mut text = String::with_capacity(bytes.len() * 2 + 4);
    let mut replacements = 0;
    let mut pos = 0;
    loop {
        let (result, read) =
            decoder.decode_to_string_without_replacement(&bytes[pos..], &mut text, true);
        pos += read;
        match result {
            DecoderResult::InputEmpty => break,
            DecoderResult::OutputFull => text.reserve(bytes.len() - pos + 16),
            DecoderResult::Malformed(_, _) => {
                text.push(char::REPLACEMENT_CHARACTER);
                replacements += 1;
            }
        }
    }
    Transcoded {
        text,
        encoding,
        replacements,
        byte_len: bytes.len(),
    }
}

/// Resolves a declared encoding (detecting when unknown) and transcodes.
pub fn decode_document(doc: &RawDocument) -> Transcoded {
    let enc = match doc.declared_encoding {
        DeclaredEncoding::Known(e) => e,
        DeclaredEncoding::Unknown => detect_encoding(&doc.bytes),
    };
    transcode(&doc.bytes, enc)
}

fn is_nonspacing_mark(c: char) -> bool {
    get_general_category(c) == GeneralCategory::NonspacingMark
}

/// True for characters whose compatibility decomposition is a space
/// followed only by nonspacing marks.
fn is_spacing_accent(c: char) -> bool {
    if c == ' ' {
        return false;
    }
    let mut first = None;
    let mut rest_marks = true;
    let mut n = 0;
    decompose_compatible(c, |d| {
        if n == 0 {
            first = Some(d);
        } else if !is_nonspacing_mark(d) {
            rest_marks = false;
        }
        n += 1;
    });
    n > 1 && first == Some(' ') && rest_marks
}

/// Canonicalizes `text`: NFKD, nonspacing-mark removal, lowercasing and
/// whitespace collapse, each gated by `config`.
///
/// Spacing diacritics (e.g. U+0384 GREEK TONOS) decompose to a space plus
/// a combining mark; when accents are stripped the whole character is
/// dropped rather than leaving a stray space behind.
pub fn normalize(text: &str, config: &NormConfig) -> String {
    let mut out: String = if config.apply_nfkd {
        if config.strip_accents {
            text.chars()
                .filter(|&c| !is_spacing_accent(c))
                .collect::<String>()
                .nfkd()
                .filter(|&c| !is_nonspacing_mark(c))
                .collect()
        } else {
            text.nfkd().collect()
        }
    } else {
        text.to_string()
    };
    if config.lowercase {
        out = out.to_lowercase();
    }
    if config.collapse_whitespace {
        out = collapse_whitespace(&out);
    } else if out.contains('\r') {
        out = out.replace("\r\n", "\n").replace('\r', "\n");
    }
    out
}

fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Per-document outcome of corpus normalization; serialized as one line of
/// the sidecar report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReportLine {
    pub source_id: String,
    pub encoding: Encoding,
    pub replacements: usize,
    pub bytes: usize,
    pub flagged: bool,
}

pub fn normalize_document(
    doc: &RawDocument,
    config: &NormConfig,
    threshold: f64,
) -> (NormalizedDocument, NormReportLine) {
    let decoded = decode_document(doc);
    let text = normalize(&decoded.text, config);
    let report = NormReportLine {
        source_id: doc.source_id.clone(),
        encoding: decoded.encoding,
        replacements: decoded.replacements,
        bytes: decoded.byte_len,
        flagged: decoded.exceeds(threshold),
    };
    (
        NormalizedDocument {
            text,
            source_id: doc.source_id.clone(),
            config_fingerprint: config.fingerprint(),
        },
        report,
    )
}

/// Normalizes documents in parallel; output order follows input order.
pub fn normalize_corpus(
    docs: &[RawDocument],
    config: &NormConfig,
    threshold: f64,
) -> Vec<(NormalizedDocument, NormReportLine)> {
    docs.par_iter()
        .map(|d| normalize_document(d, config, threshold))
        .collect()
}

/// Number of maximal runs of Unicode whitespace in `text`.
pub fn whitespace_runs(text: &str) -> usize {
    let mut runs = 0;
    let mut in_run = false;
    for c in text.chars() {
        let ws = c.is_whitespace();
        if ws && !in_run {
            runs += 1;
        }
        in_run = ws;
    }
    runs
}
