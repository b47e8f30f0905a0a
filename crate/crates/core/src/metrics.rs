//! Entity-level NER scoring and single-label classification scoring.
//!
//! Ratios are kept in `[0, 1]` internally; the table renderers scale to
//! percentages (one decimal for NER, two for classification).

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntityTypeSet, Level, Tag};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("gold has {gold} sequences, prediction has {pred}")]
    SentenceCountMismatch { gold: usize, pred: usize },
    #[error("sentence {index}: gold has {gold} tags, prediction has {pred}")]
    LengthMismatch { index: usize, gold: usize, pred: usize },
    #[error("entity type `{0}` is not in the configured type set")]
    UnknownType(String),
    #[error("label {label} at position {index} is outside the {num_labels}-label set")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_labels: usize,
    },
    #[error("no instances to score")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub entity_type: String,
    /// Inclusive token index.
    pub start: usize,
    /// Exclusive token index.
    pub end: usize,
}

/// Maximal `B-X (I-X)*` runs. An `I-X` that does not continue an `X`
/// entity opens a new one, which matches scoring repaired input.
pub fn extract_spans(tags: &[Tag]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let continues = matches!((tag, &open), (Tag::Inside(t), Some((cur, _))) if t == cur);
        if continues {
            continue;
        }
        if let Some((t, start)) = open.take() {
            spans.push(EntitySpan { entity_type: t, start, end: i });
        }
        if let Some(t) = tag.entity_type() {
            open = Some((t.to_string(), i));
        }
    }
    if let Some((t, start)) = open {
        spans.push(EntitySpan {
            entity_type: t,
            start,
            end: tags.len(),
        });
    }
    spans
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl TypeCounts {
    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.fp, self.fn_)
    }
}

/// Precision, recall and F1 as ratios. Zero denominators yield 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // The harmonic mean of equal values is that value; the general
        // formula can land one ulp away.
        let f1 = if precision == recall {
            precision
        } else if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

/// Per-type counts, in the order of the type set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub types: Vec<String>,
    pub counts: Vec<TypeCounts>,
}

impl ConfusionCounts {
    pub fn total(&self) -> TypeCounts {
        self.counts.iter().fold(TypeCounts::default(), |a, c| TypeCounts {
            tp: a.tp + c.tp,
            fp: a.fp + c.fp,
            fn_: a.fn_ + c.fn_,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub entity_type: String,
    pub prf: Prf,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerReport {
    pub per_type: Vec<TypeScore>,
    pub micro: Prf,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub counts: ConfusionCounts,
}

impl NerReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let per_type: Vec<TypeScore> = counts
            .types
            .iter()
            .zip(&counts.counts)
            .map(|(t, c)| TypeScore {
                entity_type: t.clone(),
                prf: c.prf(),
                support: c.support(),
            })
            .collect();
        let total = counts.total();
        let micro = total.prf();
        let macro_f1 = if per_type.is_empty() {
            0.0
        } else {
            per_type.iter().map(|s| s.prf.f1).sum::<f64>() / per_type.len() as f64
        };
        let support: u64 = per_type.iter().map(|s| s.support).sum();
        let weighted_f1 = if support == 0 {
            0.0
        } else {
            per_type.iter().map(|s| s.support as f64 * s.prf.f1).sum::<f64>() / support as f64
        };
        NerReport {
            per_type,
            micro,
            macro_f1,
            weighted_f1,
            counts,
        }
    }

    /// Named scalar metrics, keyed as in the results tables.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .per_type
            .iter()
            .map(|s| (s.entity_type.clone(), s.prf.f1))
            .collect();
        out.push(("micro".into(), self.micro.f1));
        out.push(("macro".into(), self.macro_f1));
        out.push(("weighted".into(), self.weighted_f1));
        out
    }
}

fn check_aligned<T>(gold: &[Vec<T>], pred: &[Vec<T>]) -> Result<(), MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::SentenceCountMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    for (index, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(MetricsError::LengthMismatch {
                index,
                gold: g.len(),
                pred: p.len(),
            });
        }
    }
    Ok(())
}

/// Exact-match entity scoring.
pub fn score_ner(
    gold: &[Vec<Tag>],
    pred: &[Vec<Tag>],
    types: &EntityTypeSet,
) -> Result<NerReport, MetricsError> {
    check_aligned(gold, pred)?;
    let mut counts = vec![TypeCounts::default(); types.len()];
    let type_index = |t: &str| types.index_of(t).ok_or_else(|| MetricsError::UnknownType(t.to_string()));
    for (g, p) in gold.iter().zip(pred) {
        let gold_spans = extract_spans(g);
        let pred_spans = extract_spans(p);
        // Spans from one sequence never overlap, so a start index plus type
        // identifies a span up to its end.
        let gold_by_start: HashMap<(usize, &str), usize> = gold_spans
            .iter()
            .map(|s| ((s.start, s.entity_type.as_str()), s.end))
            .collect();
        for s in &pred_spans {
            let ti = type_index(&s.entity_type)?;
            if gold_by_start.get(&(s.start, s.entity_type.as_str())) == Some(&s.end) {
                counts[ti].tp += 1;
            } else {
                counts[ti].fp += 1;
            }
        }
        let pred_by_start: HashMap<(usize, &str), usize> = pred_spans
            .iter()
            .map(|s| ((s.start, s.entity_type.as_str()), s.end))
            .collect();
        for s in &gold_spans {
            let ti = type_index(&s.entity_type)?;
            if pred_by_start.get(&(s.start, s.entity_type.as_str())) != Some(&s.end) {
                counts[ti].fn_ += 1;
            }
        }
    }
    Ok(NerReport::from_counts(ConfusionCounts {
        types: types.types().to_vec(),
        counts,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsReport {
    pub level: Option<Level>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Micro-averaged scores over single-label predictions. Every wrong
/// prediction is one false positive (for the predicted class) and one false
/// negative (for the gold class), so precision, recall and F1 all coincide
/// with accuracy.
pub fn score_classification(
    gold: &[usize],
    pred: &[usize],
    num_labels: usize,
    level: Option<Level>,
) -> Result<ClsReport, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::SentenceCountMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (index, &label) in gold.iter().chain(pred).enumerate() {
        if label >= num_labels {
            return Err(MetricsError::LabelOutOfRange {
                index: index % gold.len(),
                label,
                num_labels,
            });
        }
    }
    let mut per_class = vec![TypeCounts::default(); num_labels];
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            per_class[g].tp += 1;
        } else {
            per_class[p].fp += 1;
            per_class[g].fn_ += 1;
        }
    }
    let total = per_class.iter().fold(TypeCounts::default(), |a, c| TypeCounts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let prf = total.prf();
    Ok(ClsReport {
        level,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        accuracy: total.tp as f64 / gold.len() as f64,
        n: gold.len(),
    })
}

/// Short column header for an entity type, as used in results tables.
pub fn type_abbreviation(t: &str) -> &str {
    match t {
        "FACILITY" => "F",
        "GPE" => "GPE",
        "LEG-REF" => "LR",
        "LOC-NAT" => "LN",
        "LOC-UNK" => "LU",
        "ORG" => "ORG",
        "PERSON" => "P",
        "PUBLIC-DOC" => "PD",
        other => other,
    }
}

/// Tab-separated per-type table plus aggregate columns, values in percent
/// with one decimal.
pub fn render_ner_report(report: &NerReport) -> String {
    let mut out = String::from("metric");
    for s in &report.per_type {
        let _ = write!(out, "\t{}", type_abbreviation(&s.entity_type));
    }
    out.push_str("\tmicro\tmacro\tweighted\n");
    let pct = |x: f64| format!("{:.1}", 100.0 * x);
    for (name, pick) in [
        ("precision", (|p: &Prf| p.precision) as fn(&Prf) -> f64),
        ("recall", |p: &Prf| p.recall),
        ("f1", |p: &Prf| p.f1),
    ] {
        out.push_str(name);
        for s in &report.per_type {
            let _ = write!(out, "\t{}", pct(pick(&s.prf)));
        }
        let (macro_col, weighted_col) = if name == "f1" {
            (pct(report.macro_f1), pct(report.weighted_f1))
        } else {
            ("-".to_string(), "-".to_string())
        };
        let _ = writeln!(out, "\t{}\t{}\t{}", pct(pick(&report.micro)), macro_col, weighted_col);
    }
    out.push_str("support");
    for s in &report.per_type {
        let _ = write!(out, "\t{}", s.support);
    }
    let _ = writeln!(out, "\t{}\t-\t-", report.counts.total().support());
    out
}

/// Tab-separated precision/recall/F1 row in percent with two decimals.
pub fn render_cls_report(report: &ClsReport) -> String {
    let level = report.level.map(Level::name).unwrap_or("labels");
    format!(
        "level\tprecision\trecall\tf1\n{level}\t{:.2}\t{:.2}\t{:.2}\n",
        100.0 * report.precision,
        100.0 * report.recall,
        100.0 * report.f1
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tags(s: &str) -> Vec<Tag> {
        s.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    fn span(t: &str, start: usize, end: usize) -> EntitySpan {
        EntitySpan {
            entity_type: t.into(),
            start,
            end,
        }
    }

    #[test]
    fn span_extraction() {
        assert_eq!(extract_spans(&tags("O B-ORG I-ORG O")), vec![span("ORG", 1, 3)]);
        assert_eq!(
            extract_spans(&tags("B-GPE B-GPE")),
            vec![span("GPE", 0, 1), span("GPE", 1, 2)]
        );
        assert!(extract_spans(&[]).is_empty());
        assert_eq!(
            extract_spans(&tags("B-ORG I-GPE I-GPE O I-ORG")),
            vec![span("ORG", 0, 1), span("GPE", 1, 3), span("ORG", 4, 5)]
        );
        assert_eq!(extract_spans(&tags("B-ORG I-ORG")), vec![span("ORG", 0, 2)]);
    }

    #[test]
    fn identity_scores_one() {
        let types = EntityTypeSet::default();
        let gold = vec![tags("O B-ORG I-ORG O B-GPE"), tags("B-PERSON O")];
        let r = score_ner(&gold, &gold, &types).unwrap();
        assert_eq!(r.micro.f1, 1.0);
        assert_eq!(r.weighted_f1, 1.0);
        for s in &r.per_type {
            if s.support > 0 {
                assert_eq!(s.prf.f1, 1.0);
            }
        }
    }

    #[test]
    fn identity_with_all_types_present() {
        let types = EntityTypeSet::new(vec!["ORG".into(), "GPE".into()]).unwrap();
        let gold = vec![tags("B-ORG B-GPE")];
        let r = score_ner(&gold, &gold, &types).unwrap();
        assert_eq!((r.micro.f1, r.macro_f1, r.weighted_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn boundary_error_halves_micro() {
        let types = EntityTypeSet::default();
        // gold {ORG(1,3), GPE(5,6)}, pred {ORG(1,3), GPE(4,6)}
        let gold = vec![tags("O B-ORG I-ORG O O B-GPE")];
        let pred = vec![tags("O B-ORG I-ORG O B-GPE I-GPE")];
        let r = score_ner(&gold, &pred, &types).unwrap();
        assert_eq!(r.micro.precision, 0.5);
        assert_eq!(r.micro.recall, 0.5);
        assert_eq!(r.micro.f1, 0.5);
        let total = r.counts.total();
        assert_eq!((total.tp, total.fp, total.fn_), (1, 1, 1));
    }

    #[test]
    fn zero_division_and_absent_types() {
        let types = EntityTypeSet::new(vec!["ORG".into(), "GPE".into()]).unwrap();
        let gold = vec![tags("B-ORG O")];
        let pred = vec![tags("B-ORG O")];
        let r = score_ner(&gold, &pred, &types).unwrap();
        // GPE absent everywhere: F1 0 for macro, weight 0 for weighted.
        assert_eq!(r.per_type[1].prf, Prf::default());
        assert_eq!(r.macro_f1, 0.5);
        assert_eq!(r.weighted_f1, 1.0);
    }

    #[test]
    fn misaligned_and_unknown() {
        let types = EntityTypeSet::default();
        assert!(matches!(
            score_ner(&[tags("O")], &[], &types),
            Err(MetricsError::SentenceCountMismatch { .. })
        ));
        assert!(matches!(
            score_ner(&[tags("O O")], &[tags("O")], &types),
            Err(MetricsError::LengthMismatch { index: 0, .. })
        ));
        assert!(matches!(
            score_ner(&[tags("B-CITY")], &[tags("O")], &types),
            Err(MetricsError::UnknownType(_))
        ));
    }

    #[test]
    fn classification_identity() {
        let r = score_classification(&[0, 1, 2, 1], &[0, 1, 2, 1], 3, Some(Level::Volume)).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = score_classification(&[0, 1, 2, 1], &[0, 1, 2, 0], 3, None).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.accuracy), (0.75, 0.75, 0.75, 0.75));
        assert!(render_cls_report(&r).contains("75.00\t75.00\t75.00"));
        assert!(score_classification(&[0], &[3], 3, None).is_err());
        assert!(score_classification(&[], &[], 3, None).is_err());
        assert!(score_classification(&[0], &[0, 1], 3, None).is_err());
    }

    #[test]
    fn report_table_has_fixed_columns() {
        let types = EntityTypeSet::default();
        let gold = vec![tags("B-FACILITY O B-PUBLIC-DOC")];
        let r = score_ner(&gold, &gold, &types).unwrap();
        let table = render_ner_report(&r);
        let header = table.lines().next().unwrap();
        assert_eq!(
            header,
            "metric\tF\tGPE\tLR\tLN\tLU\tORG\tP\tPD\tmicro\tmacro\tweighted"
        );
        assert!(table.lines().all(|l| l.split('\t').count() == 12));
    }

    // Token-by-token span reader kept deliberately separate from
    // `extract_spans`: it walks the string labels and closes spans lazily.
    fn naive_spans(tags: &[String]) -> HashSet<(String, usize, usize)> {
        let mut out = HashSet::new();
        let mut i = 0;
        while i < tags.len() {
            let t = &tags[i];
            if t == "O" {
                i += 1;
                continue;
            }
            let ty = t[2..].to_string();
            let mut j = i + 1;
            while j < tags.len() && tags[j] == format!("I-{ty}") {
                j += 1;
            }
            out.insert((ty, i, j));
            i = j;
        }
        out
    }

    fn brute_force(gold: &[Vec<Tag>], pred: &[Vec<Tag>], types: &EntityTypeSet) -> ConfusionCounts {
        let mut counts = vec![TypeCounts::default(); types.len()];
        for (g, p) in gold.iter().zip(pred) {
            let g: Vec<String> = g.iter().map(|t| t.to_string()).collect();
            let p: Vec<String> = p.iter().map(|t| t.to_string()).collect();
            let gs = naive_spans(&g);
            let ps = naive_spans(&p);
            for s in gs.intersection(&ps) {
                counts[types.index_of(&s.0).unwrap()].tp += 1;
            }
            for s in ps.difference(&gs) {
                counts[types.index_of(&s.0).unwrap()].fp += 1;
            }
            for s in gs.difference(&ps) {
                counts[types.index_of(&s.0).unwrap()].fn_ += 1;
            }
        }
        ConfusionCounts {
            types: types.types().to_vec(),
            counts,
        }
    }

    #[test]
    fn matches_brute_force_on_fixed_cases() {
        let types = EntityTypeSet::default();
        let gold = vec![tags("B-ORG I-ORG O B-GPE B-GPE I-GPE"), tags("I-LOC-NAT O")];
        let pred = vec![tags("B-ORG I-ORG I-ORG B-GPE B-GPE I-GPE"), tags("B-LOC-NAT O")];
        let r = score_ner(&gold, &pred, &types).unwrap();
        assert_eq!(r.counts, brute_force(&gold, &pred, &types));
    }
}
