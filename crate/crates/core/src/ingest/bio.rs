use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CharMap, PhiSpan, Sentence};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Bio {
    O,
    B(String),
    I(String),
}

impl Bio {
    pub fn class(&self) -> Option<&str> {
        match self {
            Bio::O => None,
            Bio::B(c) | Bio::I(c) => Some(c),
        }
    }
}

impl fmt::Display for Bio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bio::O => f.write_str("O"),
            Bio::B(c) => write!(f, "B-{c}"),
            Bio::I(c) => write!(f, "I-{c}"),
        }
    }
}

impl FromStr for Bio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "O" => Ok(Bio::O),
            _ => match s.split_once('-') {
                Some(("B", c)) if !c.is_empty() => Ok(Bio::B(c.to_string())),
                Some(("I", c)) if !c.is_empty() => Ok(Bio::I(c.to_string())),
                _ => Err(format!("not a BIO label: `{s}`")),
            },
        }
    }
}

impl From<Bio> for String {
    fn from(b: Bio) -> String {
        b.to_string()
    }
}

impl TryFrom<String> for Bio {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioEncoding {
    pub labels: Vec<Bio>,
    /// Spans whose boundaries fell inside a token and were widened to the
    /// enclosing token boundaries.
    pub snapped: usize,
}

/// Labels the tokens of `sentence` from character spans. Spans not touching
/// the sentence are ignored; a misaligned boundary is snapped outward to the
/// covering token.
pub fn encode_bio(sentence: &Sentence, spans: &[PhiSpan]) -> BioEncoding {
    let mut labels = vec![Bio::O; sentence.len()];
    let mut snapped = 0;
    for span in spans {
        let covered: Vec<usize> = (0..sentence.len())
            .filter(|&i| {
                let t = &sentence.tokens[i];
                t.start < span.end && span.start < t.end
            })
            .collect();
        let (Some(&first), Some(&last)) = (covered.first(), covered.last()) else {
            continue;
        };
        let toks = &sentence.tokens;
        let inside_first = span.start > toks[first].start && span.start < toks[first].end;
        let inside_last = span.end > toks[last].start && span.end < toks[last].end;
        if inside_first || inside_last {
            snapped += 1;
            log::warn!(
                "span {}..{} ({}) is not token-aligned; snapped to {}..{}",
                span.start,
                span.end,
                span.label,
                toks[first].start,
                toks[last].end
            );
        }
        if covered.iter().any(|&i| labels[i] != Bio::O) {
            continue;
        }
        labels[first] = Bio::B(span.label.clone());
        for &i in &covered[1..] {
            labels[i] = Bio::I(span.label.clone());
        }
    }
    BioEncoding { labels, snapped }
}

/// Converts a label sequence back into spans over `text`. An `I-X` that does
/// not continue an `X` chunk opens a new chunk, as `B-X` would.
pub fn decode_bio(sentence: &Sentence, labels: &[Bio], text: &str) -> Vec<PhiSpan> {
    assert_eq!(sentence.len(), labels.len(), "one label per token");
    let map = CharMap::new(text);
    let mut out = Vec::new();
    let mut open: Option<(&str, usize, usize)> = None;
    let mut close = |open: &mut Option<(&str, usize, usize)>| {
        if let Some((class, s, e)) = open.take() {
            let (start, end) = (sentence.tokens[s].start, sentence.tokens[e].end);
            out.push(PhiSpan {
                start,
                end,
                label: class.to_string(),
                text: map.slice(text, start, end).unwrap_or_default().to_string(),
            });
        }
    };
    for (i, label) in labels.iter().enumerate() {
        match label {
            Bio::O => close(&mut open),
            Bio::I(c) if open.is_some_and(|(oc, _, _)| oc == c) => {
                if let Some(o) = open.as_mut() {
                    o.2 = i;
                }
            }
            Bio::B(c) | Bio::I(c) => {
                close(&mut open);
                open = Some((c, i, i));
            }
        }
    }
    close(&mut open);
    out
}
