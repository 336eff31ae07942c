use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{pair, EvalError};
use crate::ingest::{tokenize, AnnotatedDocument, PhiSpan};

/// Token-level counts; rows are gold classes, columns predicted classes.
/// Index 0 is `O`, the remaining labels are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn get(&self, gold: &str, pred: &str) -> u64 {
        let idx = |l: &str| self.labels.iter().position(|x| x == l);
        match (idx(gold), idx(pred)) {
            (Some(g), Some(p)) => self.counts[g][p],
            _ => 0,
        }
    }

    pub fn row_sum(&self, gold: &str) -> u64 {
        self.labels
            .iter()
            .position(|x| x == gold)
            .map_or(0, |g| self.counts[g].iter().sum())
    }

    /// Header row `gold\pred,<labels>`, then one row per gold label.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\pred");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

fn class_of(spans: &[PhiSpan], start: usize, end: usize) -> &str {
    spans
        .iter()
        .find(|s| s.start < end && start < s.end)
        .map_or("O", |s| s.label.as_str())
}

/// Each token takes the class of the span it overlaps, or `O`.
pub fn confusion_matrix(gold: &[AnnotatedDocument], pred: &[AnnotatedDocument]) -> Result<ConfusionMatrix, EvalError> {
    let pairs = pair(gold, pred)?;
    let mut classes = BTreeSet::new();
    for (g, p) in &pairs {
        classes.extend(g.spans.iter().chain(&p.spans).map(|s| s.label.clone()));
    }
    classes.remove("O");
    let labels: Vec<String> = std::iter::once("O".to_string()).chain(classes).collect();
    let index = |l: &str| labels.iter().position(|x| x == l).expect("label collected above");
    let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
    for (g, p) in &pairs {
        for t in tokenize(&g.text) {
            let gi = index(class_of(&g.spans, t.start, t.end));
            let pi = index(class_of(&p.spans, t.start, t.end));
            counts[gi][pi] += 1;
        }
    }
    Ok(ConfusionMatrix { labels, counts })
}
