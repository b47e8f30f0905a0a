//! Dynamic masking for MLM batches.
//!
//! A new pattern is drawn every time a sequence is fed to the model. All
//! randomness comes from ChaCha8 streams: either a caller-owned generator
//! advanced row by row, or per-row streams keyed by `(seed, epoch, row)`
//! (see [`row_rng`]) so that parallel collation is independent of worker
//! count.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PackedSequence;
use crate::tokenizer::{TokenId, TokenizerModel};

/// Label value at positions that do not contribute to the loss.
pub const IGNORE: i64 = -100;

#[derive(Debug, Error, PartialEq)]
pub enum MaskingError {
    #[error("masking policy invalid: {0}")]
    BadPolicy(String),
    #[error("row {row} has length {len}, expected {expected}")]
    Ragged { row: usize, len: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingPolicy {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn new(select_prob: f64, mask_frac: f64, random_frac: f64, keep_frac: f64) -> Result<Self, MaskingError> {
        let p = MaskingPolicy {
            select_prob,
            mask_frac,
            random_frac,
            keep_frac,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MaskingError> {
        let all = [self.select_prob, self.mask_frac, self.random_frac, self.keep_frac];
        if all.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(MaskingError::BadPolicy("probabilities must lie in [0, 1]".into()));
        }
        let sum = self.mask_frac + self.random_frac + self.keep_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MaskingError::BadPolicy(format!(
                "mask/random/keep fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// What the masker needs to know about the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingVocab {
    pub mask_id: TokenId,
    pub special_ids: Vec<TokenId>,
    /// Random replacements are drawn uniformly from this range.
    pub regular_ids: std::ops::Range<TokenId>,
}

impl MaskingVocab {
    pub fn from_tokenizer(model: &TokenizerModel) -> Self {
        let s = model.specials();
        MaskingVocab {
            mask_id: s.mask.id,
            special_ids: s.ids().to_vec(),
            regular_ids: model.regular_ids(),
        }
    }

    fn is_special(&self, id: TokenId) -> bool {
        self.special_ids.contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedRow {
    pub input_ids: Vec<TokenId>,
    /// Original id where selected, [`IGNORE`] elsewhere.
    pub labels: Vec<i64>,
    pub attention_mask: Vec<u8>,
}

impl MaskedRow {
    pub fn selected(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Row-major `batch × seq_len` matrices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub input_ids: Vec<TokenId>,
    pub labels: Vec<i64>,
    pub attention_mask: Vec<u8>,
}

impl MaskedBatch {
    pub fn from_rows(rows: Vec<MaskedRow>) -> Result<Self, MaskingError> {
        let seq_len = rows.first().map_or(0, |r| r.input_ids.len());
        let mut b = MaskedBatch {
            batch: rows.len(),
            seq_len,
            ..Default::default()
        };
        for (i, r) in rows.into_iter().enumerate() {
            if r.input_ids.len() != seq_len || r.labels.len() != seq_len || r.attention_mask.len() != seq_len {
                return Err(MaskingError::Ragged {
                    row: i,
                    len: r.input_ids.len(),
                    expected: seq_len,
                });
            }
            b.input_ids.extend(r.input_ids);
            b.labels.extend(r.labels);
            b.attention_mask.extend(r.attention_mask);
        }
        Ok(b)
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn row(&self, i: usize) -> MaskedRow {
        let r = i * self.seq_len..(i + 1) * self.seq_len;
        MaskedRow {
            input_ids: self.input_ids[r.clone()].to_vec(),
            labels: self.labels[r.clone()].to_vec(),
            attention_mask: self.attention_mask[r].to_vec(),
        }
    }

    pub fn selected(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Masks one packed sequence. Each eligible position (real, non-special)
/// is selected with `select_prob`; a selected position becomes the mask
/// token, a uniformly drawn regular token, or stays as is, in proportions
/// `mask_frac : random_frac : keep_frac`.
pub fn apply_dynamic_mask<R: Rng + ?Sized>(
    seq: &PackedSequence,
    policy: &MaskingPolicy,
    vocab: &MaskingVocab,
    rng: &mut R,
) -> MaskedRow {
    let mut input_ids = seq.ids.clone();
    let mut labels = vec![IGNORE; seq.ids.len()];
    for (j, (&id, &real)) in seq.ids.iter().zip(&seq.attention_mask).enumerate() {
        if real == 0 || vocab.is_special(id) {
            continue;
        }
        if rng.gen::<f64>() >= policy.select_prob {
            continue;
        }
        labels[j] = id as i64;
        let action: f64 = rng.gen();
        if action < policy.mask_frac {
            input_ids[j] = vocab.mask_id;
        } else if action < policy.mask_frac + policy.random_frac {
            input_ids[j] = rng.gen_range(vocab.regular_ids.clone());
        }
    }
    MaskedRow {
        input_ids,
        labels,
        attention_mask: seq.attention_mask.clone(),
    }
}

/// Masks and stacks `seqs` in order, drawing from one advancing stream.
pub fn collate<R: Rng + ?Sized>(
    seqs: &[PackedSequence],
    policy: &MaskingPolicy,
    vocab: &MaskingVocab,
    rng: &mut R,
) -> Result<MaskedBatch, MaskingError> {
    check_lengths(seqs)?;
    let rows = seqs
        .iter()
        .map(|s| apply_dynamic_mask(s, policy, vocab, rng))
        .collect();
    MaskedBatch::from_rows(rows)
}

fn check_lengths(seqs: &[PackedSequence]) -> Result<(), MaskingError> {
    let expected = seqs.first().map_or(0, PackedSequence::len);
    for (row, s) in seqs.iter().enumerate() {
        if s.len() != expected || s.attention_mask.len() != expected {
            return Err(MaskingError::Ragged {
                row,
                len: s.len(),
                expected,
            });
        }
    }
    Ok(())
}

/// Independent ChaCha8 stream for one row of one epoch: the generator is
/// seeded from `seed` and switched to stream `epoch << 32 | row`.
pub fn row_rng(seed: u64, epoch: u32, row: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | row as u64);
    rng
}

/// Collates with per-row keyed streams, in parallel. `first_row` is the
/// global index of `seqs[0]` within the epoch.
pub fn collate_keyed(
    seqs: &[PackedSequence],
    policy: &MaskingPolicy,
    vocab: &MaskingVocab,
    seed: u64,
    epoch: u32,
    first_row: u32,
) -> Result<MaskedBatch, MaskingError> {
    check_lengths(seqs)?;
    let rows = seqs
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = row_rng(seed, epoch, first_row + i as u32);
            apply_dynamic_mask(s, policy, vocab, &mut rng)
        })
        .collect();
    MaskedBatch::from_rows(rows)
}

/// Human-readable dump of one masked row: position, model input, label.
pub fn render_masked_row(row: &MaskedRow, tokenizer: &TokenizerModel) -> String {
    let name = |id: i64| -> String {
        if id == IGNORE {
            "-".to_string()
        } else {
            tokenizer.id_to_token(id as TokenId).unwrap_or("?").to_string()
        }
    };
    let mut out = format!("{:>5}  {:<20}  {:<20}\n", "pos", "input", "label");
    for (j, (&inp, &lab)) in row.input_ids.iter().zip(&row.labels).enumerate() {
        if row.attention_mask[j] == 0 {
            break;
        }
        let marker = if lab != IGNORE { "*" } else { " " };
        let _ = writeln!(out, "{j:>5}{marker} {:<20}  {:<20}", name(inp as i64), name(lab));
    }
    out
}
