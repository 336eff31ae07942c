use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::ingest::AnnotatedDocument;

/// Per-document character intervals of real (non-augmented) text. A
/// document without entries has no real text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    pub regions: BTreeMap<String, Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub retained: usize,
    /// Spans entirely outside every region.
    pub dropped_outside: usize,
    /// Spans crossing a region boundary.
    pub dropped_straddling: usize,
}

impl FilterStats {
    pub fn dropped(&self) -> usize {
        self.dropped_outside + self.dropped_straddling
    }
}

impl RegionMask {
    /// Mask covering every document entirely.
    pub fn whole(docs: &[AnnotatedDocument]) -> Self {
        Self {
            regions: docs
                .iter()
                .map(|d| (d.doc_id.clone(), vec![(0, d.char_len())]))
                .collect(),
        }
    }

    pub fn insert(&mut self, doc_id: impl Into<String>, start: usize, end: usize) {
        let v = self.regions.entry(doc_id.into()).or_default();
        v.push((start, end));
        v.sort_unstable();
    }

    /// Entries for the documents in `docs` only.
    pub fn restricted_to(&self, docs: &[AnnotatedDocument]) -> Self {
        Self {
            regions: docs
                .iter()
                .filter_map(|d| Some((d.doc_id.clone(), self.regions.get(&d.doc_id)?.clone())))
                .collect(),
        }
    }

    /// Intervals must be non-empty, sorted, disjoint and inside their
    /// document.
    pub fn validate(&self, docs: &[AnnotatedDocument]) -> Result<(), EvalError> {
        let lens: BTreeMap<&str, usize> = docs.iter().map(|d| (d.doc_id.as_str(), d.char_len())).collect();
        for (id, intervals) in &self.regions {
            let bad = |message: String| EvalError::Mask {
                doc_id: id.clone(),
                message,
            };
            let len = *lens.get(id.as_str()).ok_or_else(|| bad("unknown document".into()))?;
            for (i, &(s, e)) in intervals.iter().enumerate() {
                if s >= e || e > len {
                    return Err(bad(format!("interval {s}..{e} invalid for length {len}")));
                }
                if i > 0 && intervals[i - 1].1 > s {
                    return Err(bad(format!("interval {s}..{e} overlaps its predecessor")));
                }
            }
        }
        Ok(())
    }

    /// Tab-separated `doc_id start end` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, intervals) in &self.regions {
            for (s, e) in intervals {
                out.push_str(&format!("{id}\t{s}\t{e}\n"));
            }
        }
        out
    }

    pub fn from_tsv(input: &str) -> Result<Self, EvalError> {
        let mut mask = Self::default();
        for (i, line) in input.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parsed = match fields.as_slice() {
                [id, s, e] => s
                    .parse::<usize>()
                    .ok()
                    .zip(e.parse::<usize>().ok())
                    .map(|(s, e)| (*id, s, e)),
                _ => None,
            };
            let (id, s, e) = parsed.ok_or_else(|| EvalError::Mask {
                doc_id: fields[0].to_string(),
                message: format!("line {}: expected `doc_id<TAB>start<TAB>end`", i + 1),
            })?;
            mask.insert(id, s, e);
        }
        Ok(mask)
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tsv(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_tsv()).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Keeps spans lying entirely inside one masked-in interval. Straddling
/// spans are dropped, never clipped.
pub fn filter_regions(docs: &[AnnotatedDocument], mask: &RegionMask) -> (Vec<AnnotatedDocument>, FilterStats) {
    let mut stats = FilterStats::default();
    let none = Vec::new();
    let out = docs
        .iter()
        .map(|d| {
            let intervals = mask.regions.get(&d.doc_id).unwrap_or(&none);
            let spans = d
                .spans
                .iter()
                .filter(|s| {
                    if intervals.iter().any(|&(a, b)| a <= s.start && s.end <= b) {
                        stats.retained += 1;
                        true
                    } else {
                        if intervals.iter().any(|&(a, b)| a < s.end && s.start < b) {
                            stats.dropped_straddling += 1;
                        } else {
                            stats.dropped_outside += 1;
                        }
                        false
                    }
                })
                .cloned()
                .collect();
            d.with_spans_replaced(spans)
        })
        .collect();
    if stats.dropped_straddling > 0 {
        log::info!("region filter dropped {} straddling spans", stats.dropped_straddling);
    }
    (out, stats)
}
