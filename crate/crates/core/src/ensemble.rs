//! Weighted per-token voting over several classifiers' outputs.
//!
//! Each classifier's spans are re-encoded as BIO labels over the shared
//! tokenization. Per token, a label's score is the summed weight of the
//! classifiers voting for it; the best-scoring label (O included, ties to the
//! lowest inventory index) is kept if its score reaches the threshold, and O
//! is emitted otherwise. The voted labels are decoded with the usual repair
//! of orphan `I-` labels.

use serde::{Deserialize, Serialize};

use crate::eval::{evaluate_ner, EvalError};
use crate::exec::Execution;
use crate::ingest::{decode_bio, encode_bio, sentences_of, AnnotatedDocument, Bio, Sentence};
use crate::tagger::LabelInventory;

pub const WEIGHT_RANGE: (f64, f64) = (0.5, 3.0);
pub const THRESHOLD_RANGE: (f64, f64) = (1.0, 5.0);

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("invalid ensemble configuration: {0}")]
    Config(String),
    #[error("{expected} weights but {found} predictions")]
    CountMismatch { expected: usize, found: usize },
    #[error("document `{0}`: classifier outputs disagree on the text")]
    TextMismatch(String),
    #[error("document `{doc_id}` missing from classifier {classifier}")]
    MissingDocument { doc_id: String, classifier: usize },
    #[error("label {0} is not in the inventory")]
    UnknownLabel(String),
    #[error("weight tuning needs at least two classifiers, got {0}")]
    TooFewClassifiers(usize),
    #[error("weight tuning needs a non-empty development set")]
    EmptyDev,
    #[error("empty tuning grid")]
    EmptyGrid,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One weight per classifier and an acceptance threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig", into = "RawConfig")]
pub struct EnsembleConfig {
    weights: Vec<f64>,
    threshold: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    weights: Vec<f64>,
    threshold: f64,
}

impl TryFrom<RawConfig> for EnsembleConfig {
    type Error = EnsembleError;

    fn try_from(r: RawConfig) -> Result<Self, Self::Error> {
        Self::new(r.weights, r.threshold)
    }
}

impl From<EnsembleConfig> for RawConfig {
    fn from(c: EnsembleConfig) -> Self {
        RawConfig {
            weights: c.weights,
            threshold: c.threshold,
        }
    }
}

fn within(x: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&x)
}

impl EnsembleConfig {
    pub fn new(weights: Vec<f64>, threshold: f64) -> Result<Self, EnsembleError> {
        if weights.is_empty() {
            return Err(EnsembleError::Config("at least one weight is required".into()));
        }
        if let Some(w) = weights.iter().find(|&&w| !within(w, WEIGHT_RANGE)) {
            return Err(EnsembleError::Config(format!("weight {w} outside {WEIGHT_RANGE:?}")));
        }
        if !within(threshold, THRESHOLD_RANGE) {
            return Err(EnsembleError::Config(format!(
                "threshold {threshold} outside {THRESHOLD_RANGE:?}"
            )));
        }
        Ok(Self { weights, threshold })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// Voting over label indices; `scores` is scratch space of inventory length.
fn vote_indices(votes: &[usize], weights: &[f64], threshold: f64, scores: &mut [f64]) -> usize {
    scores.iter_mut().for_each(|s| *s = 0.0);
    for (&v, &w) in votes.iter().zip(weights) {
        scores[v] += w;
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    if scores[best] >= threshold {
        best
    } else {
        0
    }
}

fn index_of(labels: &LabelInventory, l: &Bio) -> Result<usize, EnsembleError> {
    labels
        .index(l)
        .ok_or_else(|| EnsembleError::UnknownLabel(l.to_string()))
}

/// The voted label for one token. `labels` must start with O.
pub fn vote(predictions: &[Bio], config: &EnsembleConfig, labels: &LabelInventory) -> Result<Bio, EnsembleError> {
    if predictions.len() != config.weights.len() {
        return Err(EnsembleError::CountMismatch {
            expected: config.weights.len(),
            found: predictions.len(),
        });
    }
    let idx = predictions
        .iter()
        .map(|p| index_of(labels, p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut scores = vec![0.0; labels.len()];
    Ok(labels
        .label(vote_indices(&idx, &config.weights, config.threshold, &mut scores))
        .clone())
}

/// Per-token label indices of every classifier for one text, token-major.
struct TokenVotes {
    sentences: Vec<Sentence>,
    /// `votes[s][t * k + c]` for sentence s, token t, classifier c.
    votes: Vec<Vec<usize>>,
}

fn encode_votes(outputs: &[&AnnotatedDocument], labels: &LabelInventory) -> Result<TokenVotes, EnsembleError> {
    let first = outputs[0];
    if let Some(d) = outputs.iter().find(|d| d.text != first.text) {
        return Err(EnsembleError::TextMismatch(d.doc_id.clone()));
    }
    let k = outputs.len();
    let sentences = sentences_of(&first.text);
    let mut votes = Vec::with_capacity(sentences.len());
    for s in &sentences {
        let mut v = vec![0; s.len() * k];
        for (c, d) in outputs.iter().enumerate() {
            for (t, l) in encode_bio(s, &d.spans).labels.iter().enumerate() {
                v[t * k + c] = index_of(labels, l)?;
            }
        }
        votes.push(v);
    }
    Ok(TokenVotes { sentences, votes })
}

fn decode_votes(
    template: &AnnotatedDocument,
    tv: &TokenVotes,
    weights: &[f64],
    threshold: f64,
    labels: &LabelInventory,
) -> AnnotatedDocument {
    let k = weights.len();
    let mut scores = vec![0.0; labels.len()];
    let mut spans = Vec::new();
    for (s, v) in tv.sentences.iter().zip(&tv.votes) {
        let bio: Vec<Bio> = v
            .chunks(k)
            .map(|votes| {
                labels
                    .label(vote_indices(votes, weights, threshold, &mut scores))
                    .clone()
            })
            .collect();
        spans.extend(decode_bio(s, &bio, &template.text));
    }
    spans.sort();
    template.with_spans_replaced(spans)
}

/// Ensembles the outputs of all classifiers for one text.
pub fn ensemble_documents(
    outputs: &[AnnotatedDocument],
    config: &EnsembleConfig,
    labels: &LabelInventory,
) -> Result<AnnotatedDocument, EnsembleError> {
    if outputs.len() != config.weights.len() {
        return Err(EnsembleError::CountMismatch {
            expected: config.weights.len(),
            found: outputs.len(),
        });
    }
    let refs: Vec<&AnnotatedDocument> = outputs.iter().collect();
    let tv = encode_votes(&refs, labels)?;
    Ok(decode_votes(
        &outputs[0],
        &tv,
        &config.weights,
        config.threshold,
        labels,
    ))
}

/// Groups the classifiers' outputs by the document order of the first.
fn align(classifiers: &[Vec<AnnotatedDocument>]) -> Result<Vec<Vec<&AnnotatedDocument>>, EnsembleError> {
    let maps: Vec<std::collections::HashMap<&str, &AnnotatedDocument>> = classifiers
        .iter()
        .map(|docs| docs.iter().map(|d| (d.doc_id.as_str(), d)).collect())
        .collect();
    classifiers[0]
        .iter()
        .map(|d| {
            maps.iter()
                .enumerate()
                .map(|(c, m)| {
                    m.get(d.doc_id.as_str())
                        .copied()
                        .ok_or_else(|| EnsembleError::MissingDocument {
                            doc_id: d.doc_id.clone(),
                            classifier: c,
                        })
                })
                .collect()
        })
        .collect()
}

/// Ensembles whole prediction sets, matched by document id, in the order of
/// the first classifier.
pub fn ensemble_corpora(
    classifiers: &[Vec<AnnotatedDocument>],
    config: &EnsembleConfig,
    labels: &LabelInventory,
) -> Result<Vec<AnnotatedDocument>, EnsembleError> {
    if classifiers.len() != config.weights.len() {
        return Err(EnsembleError::CountMismatch {
            expected: config.weights.len(),
            found: classifiers.len(),
        });
    }
    align(classifiers)?
        .into_iter()
        .map(|group| {
            let tv = encode_votes(&group, labels)?;
            Ok(decode_votes(group[0], &tv, &config.weights, config.threshold, labels))
        })
        .collect()
}

/// Candidate values searched by [`tune_weights`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub weights: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            weights: (1..=6).map(|i| f64::from(i) * 0.5).collect(),
            thresholds: (1..=5).map(f64::from).collect(),
        }
    }
}

impl GridSpec {
    /// Grid points for `n` classifiers in lexicographic order of
    /// `(w_1, .., w_n, t)`, each value list taken in ascending order.
    pub fn points(&self, n: usize) -> Result<Vec<EnsembleConfig>, EnsembleError> {
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let (ws, ts) = (sorted(&self.weights), sorted(&self.thresholds));
        if ws.is_empty() || ts.is_empty() {
            return Err(EnsembleError::EmptyGrid);
        }
        let total = ws.len().pow(n as u32) * ts.len();
        let mut out = Vec::with_capacity(total);
        for p in 0..total {
            let mut rest = p / ts.len();
            let mut weights = vec![0.0; n];
            for slot in weights.iter_mut().rev() {
                *slot = ws[rest % ws.len()];
                rest /= ws.len();
            }
            out.push(EnsembleConfig::new(weights, ts[p % ts.len()])?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedEnsemble {
    pub config: EnsembleConfig,
    pub dev_f1: f64,
    pub points_evaluated: usize,
}

/// Exhaustive grid search for the configuration maximizing dev strict
/// micro-F1; ties go to the earliest grid point.
pub fn tune_weights(
    classifiers: &[Vec<AnnotatedDocument>],
    gold: &[AnnotatedDocument],
    labels: &LabelInventory,
    grid: &GridSpec,
    exec: Execution,
) -> Result<TunedEnsemble, EnsembleError> {
    if classifiers.len() < 2 {
        return Err(EnsembleError::TooFewClassifiers(classifiers.len()));
    }
    if gold.is_empty() || classifiers.iter().any(Vec::is_empty) {
        return Err(EnsembleError::EmptyDev);
    }
    let groups = align(classifiers)?;
    let encoded = groups
        .iter()
        .map(|g| encode_votes(g, labels))
        .collect::<Result<Vec<_>, _>>()?;
    let points = grid.points(classifiers.len())?;
    let scores = exec.map(&points, |config| -> Result<f64, EnsembleError> {
        let predicted: Vec<AnnotatedDocument> = groups
            .iter()
            .zip(&encoded)
            .map(|(g, tv)| decode_votes(g[0], tv, &config.weights, config.threshold, labels))
            .collect();
        Ok(evaluate_ner(gold, &predicted)?.micro.f1)
    });
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        let s = s?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (i, dev_f1) = best.expect("non-empty grid");
    Ok(TunedEnsemble {
        config: points[i].clone(),
        dev_f1,
        points_evaluated: points.len(),
    })
}
