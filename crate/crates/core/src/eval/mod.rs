//! Span-level scoring: per-class strict NER matching with a leak rate,
//! label-blind strict and merged detection, token confusion matrices and
//! region-restricted evaluation.
//!
//! Zero-denominator convention: precision is 0 without predictions, recall
//! is 0 without gold spans, and F1 is 0 whenever precision + recall is 0.

mod confusion;
mod region;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use confusion::{confusion_matrix, ConfusionMatrix};
pub use region::{filter_regions, FilterStats, RegionMask};

use crate::ingest::{tokenize, AnnotatedDocument, PhiSpan};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("document `{0}` has no prediction")]
    MissingPrediction(String),
    #[error("prediction for unknown document `{0}`")]
    UnexpectedPrediction(String),
    #[error("document `{0}`: predicted text differs from gold text")]
    TextMismatch(String),
    #[error("leak score needs at least one token")]
    NoTokens,
    #[error("region mask for `{doc_id}`: {message}")]
    Mask { doc_id: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Counts and derived scores of one class (or of the micro aggregate).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // Equal to 2PR / (P + R), in one correctly rounded division.
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    fn add(&mut self, tp: usize, fp: usize, fn_: usize) {
        *self = Self::from_counts(self.tp + tp, self.fp + fp, self.fn_ + fn_);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Offsets and label must match.
    Ner,
    /// Offsets must match; labels ignored.
    BinaryStrict,
    /// Offsets of merged intervals must match; labels ignored.
    BinaryMerged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: Regime,
    pub micro: Scores,
    pub per_class: BTreeMap<String, Scores>,
    pub gold_spans: usize,
    pub pred_spans: usize,
    /// Fraction of all tokens that are gold PHI tokens not inside any
    /// predicted span; reported by [`evaluate_ner`] only.
    pub leak: Option<f64>,
    pub conventions: String,
}

const CONVENTIONS: &str = "P=0 without predictions; R=0 without gold; F1=0 when P+R=0; \
leak = uncovered gold tokens / all tokens; merged = spans joined across gaps without alphanumerics";

impl EvalReport {
    /// Fixed-width table: one row per class, then the micro row.
    pub fn to_table(&self) -> String {
        let width = self.per_class.keys().map(String::len).chain([5]).max().unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:width$}  {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}",
            "class", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        let row = |out: &mut String, name: &str, s: &Scores| {
            let _ = writeln!(
                out,
                "{name:width$}  {:>6} {:>6} {:>6} {:>9.5} {:>9.5} {:>9.5}",
                s.tp, s.fp, s.fn_, s.precision, s.recall, s.f1
            );
        };
        for (name, s) in &self.per_class {
            row(&mut out, name, s);
        }
        row(&mut out, "micro", &self.micro);
        if let Some(leak) = self.leak {
            let _ = writeln!(out, "leak {leak:.5}");
        }
        out
    }
}

/// Pairs predictions with gold documents by id; both sets must coincide
/// and texts must be identical.
fn pair<'a>(
    gold: &'a [AnnotatedDocument],
    pred: &'a [AnnotatedDocument],
) -> Result<Vec<(&'a AnnotatedDocument, &'a AnnotatedDocument)>, EvalError> {
    let by_id: BTreeMap<&str, &AnnotatedDocument> = pred.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let gold_ids: HashSet<&str> = gold.iter().map(|d| d.doc_id.as_str()).collect();
    if let Some(extra) = pred.iter().find(|d| !gold_ids.contains(d.doc_id.as_str())) {
        return Err(EvalError::UnexpectedPrediction(extra.doc_id.clone()));
    }
    gold.iter()
        .map(|g| {
            let p = by_id
                .get(g.doc_id.as_str())
                .ok_or_else(|| EvalError::MissingPrediction(g.doc_id.clone()))?;
            if p.text != g.text {
                return Err(EvalError::TextMismatch(g.doc_id.clone()));
            }
            Ok((g, *p))
        })
        .collect()
}

fn report(regime: Regime, pairs: &[(Vec<Triple>, Vec<Triple>)]) -> EvalReport {
    let mut micro = Scores::default();
    let mut per_class: BTreeMap<String, Scores> = BTreeMap::new();
    let (mut n_gold, mut n_pred) = (0, 0);
    for (gold, pred) in pairs {
        n_gold += gold.len();
        n_pred += pred.len();
        let gold_set: HashSet<&(usize, usize, String)> = gold.iter().collect();
        let pred_set: HashSet<&(usize, usize, String)> = pred.iter().collect();
        for p in pred {
            let hit = gold_set.contains(p);
            per_class
                .entry(p.2.clone())
                .or_default()
                .add(hit as usize, !hit as usize, 0);
            micro.add(hit as usize, !hit as usize, 0);
        }
        for g in gold.iter().filter(|g| !pred_set.contains(g)) {
            per_class.entry(g.2.clone()).or_default().add(0, 0, 1);
            micro.add(0, 0, 1);
        }
    }
    EvalReport {
        regime,
        micro,
        per_class,
        gold_spans: n_gold,
        pred_spans: n_pred,
        leak: None,
        conventions: CONVENTIONS.to_string(),
    }
}

/// `(start, end, label)` of one span.
type Triple = (usize, usize, String);

fn triples(spans: &[PhiSpan], keep_label: bool) -> Vec<Triple> {
    let label = |s: &PhiSpan| if keep_label { s.label.clone() } else { "PHI".to_string() };
    spans.iter().map(|s| (s.start, s.end, label(s))).collect()
}

/// Strict span matching on `(start, end, label)`, with per-class breakdown
/// and leak.
pub fn evaluate_ner(gold: &[AnnotatedDocument], pred: &[AnnotatedDocument]) -> Result<EvalReport, EvalError> {
    let pairs = pair(gold, pred)?;
    let sets: Vec<_> = pairs
        .iter()
        .map(|(g, p)| (triples(&g.spans, true), triples(&p.spans, true)))
        .collect();
    let mut r = report(Regime::Ner, &sets);
    r.leak = leak_score(gold, pred).ok();
    Ok(r)
}

/// Strict matching on `(start, end)` only.
pub fn evaluate_binary_strict(gold: &[AnnotatedDocument], pred: &[AnnotatedDocument]) -> Result<EvalReport, EvalError> {
    let pairs = pair(gold, pred)?;
    let sets: Vec<_> = pairs
        .iter()
        .map(|(g, p)| (triples(&g.spans, false), triples(&p.spans, false)))
        .collect();
    Ok(report(Regime::BinaryStrict, &sets))
}

/// Label-blind matching after merging, separately in gold and prediction,
/// spans whose gap contains no alphanumeric character.
pub fn evaluate_binary_merged(gold: &[AnnotatedDocument], pred: &[AnnotatedDocument]) -> Result<EvalReport, EvalError> {
    let pairs = pair(gold, pred)?;
    let sets: Vec<_> = pairs
        .iter()
        .map(|(g, p)| {
            let chars: Vec<char> = g.text.chars().collect();
            let m = |spans: &[PhiSpan]| {
                merge_intervals(&chars, spans)
                    .into_iter()
                    .map(|(s, e)| (s, e, "PHI".to_string()))
                    .collect()
            };
            (m(&g.spans), m(&p.spans))
        })
        .collect();
    Ok(report(Regime::BinaryMerged, &sets))
}

/// Maximal intervals obtained by joining sorted, non-overlapping spans whose
/// separating characters are all non-alphanumeric.
pub fn merge_intervals(chars: &[char], spans: &[PhiSpan]) -> Vec<(usize, usize)> {
    let mut sorted: Vec<(usize, usize)> = spans.iter().map(|s| (s.start, s.end)).collect();
    sorted.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(sorted.len());
    for (s, e) in sorted {
        if let Some(last) = out.last_mut() {
            if s <= last.1 || chars[last.1..s].iter().all(|c| !c.is_alphanumeric()) {
                last.1 = last.1.max(e);
                continue;
            }
        }
        out.push((s, e));
    }
    out
}

/// Gold PHI tokens not lying entirely inside a predicted span, divided by
/// the total token count of all gold documents.
pub fn leak_score(gold: &[AnnotatedDocument], pred: &[AnnotatedDocument]) -> Result<f64, EvalError> {
    let pairs = pair(gold, pred)?;
    let (mut leaked, mut total) = (0usize, 0usize);
    for (g, p) in pairs {
        let tokens = tokenize(&g.text);
        total += tokens.len();
        leaked += tokens
            .iter()
            .filter(|t| g.spans.iter().any(|s| s.start < t.end && t.start < s.end))
            .filter(|t| !p.spans.iter().any(|s| s.start <= t.start && t.end <= s.end))
            .count();
    }
    if total == 0 {
        return Err(EvalError::NoTokens);
    }
    Ok(leaked as f64 / total as f64)
}
