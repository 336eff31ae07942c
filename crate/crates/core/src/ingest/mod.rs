//! Annotated documents: brat standoff I/O, offset-exact tokenization,
//! sentence splitting and BIO conversion.
//!
//! All offsets are character (Unicode scalar) offsets into the document text
//! after CRLF → LF normalization.

mod bio;
mod corpus;
mod standoff;
mod tokenize;

use serde::{Deserialize, Serialize};

pub use bio::{decode_bio, encode_bio, Bio, BioEncoding};
pub use corpus::{read_corpus_dir, write_corpus_dir};
pub use standoff::{parse_standoff, write_standoff};
pub use tokenize::{split_sentences, tokenize};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: discontinuous span `{offsets}` is not supported")]
    Discontinuous { line: usize, offsets: String },
    #[error("span {id}: annotated text {expected:?} does not match document text {found:?}")]
    TextMismatch {
        id: String,
        expected: String,
        found: String,
    },
    #[error("span {id}: offsets {start}..{end} outside document of length {len}")]
    OutOfBounds {
        id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("spans {first} and {second} overlap")]
    Overlap { first: String, second: String },
    #[error("{path}: {source}")]
    InFile {
        path: String,
        #[source]
        source: Box<IngestError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A protected-health-information mention.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhiSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub text: String,
}

impl PhiSpan {
    pub fn overlaps(&self, other: &PhiSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub doc_id: String,
    pub text: String,
    pub spans: Vec<PhiSpan>,
}

impl AnnotatedDocument {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: normalize_newlines(&text.into()),
            spans: Vec::new(),
        }
    }

    /// Builds a document from `(start, end, label)` triples, filling in the
    /// surface text and validating the span invariants.
    pub fn with_spans<I, S>(doc_id: impl Into<String>, text: impl Into<String>, spans: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = (usize, usize, S)>,
        S: Into<String>,
    {
        let mut doc = Self::new(doc_id, text);
        let map = CharMap::new(&doc.text);
        for (start, end, label) in spans {
            let text = map
                .slice(&doc.text, start, end)
                .ok_or_else(|| IngestError::OutOfBounds {
                    id: format!("{start}-{end}"),
                    start,
                    end,
                    len: map.len(),
                })?
                .to_string();
            doc.spans.push(PhiSpan {
                start,
                end,
                label: label.into(),
                text,
            });
        }
        doc.spans.sort();
        doc.validate()?;
        Ok(doc)
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Checks bounds, surface text, ordering and non-overlap.
    pub fn validate(&self) -> Result<(), IngestError> {
        let map = CharMap::new(&self.text);
        for (i, s) in self.spans.iter().enumerate() {
            let id = format!("#{}", i + 1);
            if s.start >= s.end || s.end > map.len() {
                return Err(IngestError::OutOfBounds {
                    id,
                    start: s.start,
                    end: s.end,
                    len: map.len(),
                });
            }
            let found = map.slice(&self.text, s.start, s.end).unwrap_or_default();
            if found != s.text {
                return Err(IngestError::TextMismatch {
                    id,
                    expected: s.text.clone(),
                    found: found.to_string(),
                });
            }
            if i > 0 && self.spans[i - 1].end > s.start {
                return Err(IngestError::Overlap {
                    first: format!("#{i}"),
                    second: id,
                });
            }
        }
        Ok(())
    }

    pub fn with_spans_replaced(&self, spans: Vec<PhiSpan>) -> Self {
        Self {
            doc_id: self.doc_id.clone(),
            text: self.text.clone(),
            spans,
        }
    }
}

/// A token with character offsets into its source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub label: Option<Bio>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn start(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.start)
    }

    pub fn end(&self) -> usize {
        self.tokens.last().map_or(0, |t| t.end)
    }
}

/// Tokenizes and splits `text` into sentences.
pub fn sentences_of(text: &str) -> Vec<Sentence> {
    split_sentences(tokenize(text), text)
}

pub fn normalize_newlines(text: &str) -> String {
    if text.contains('\r') {
        text.replace("\r\n", "\n")
    } else {
        text.to_string()
    }
}

/// Character-offset → byte-offset lookup for one string.
#[derive(Debug, Clone)]
pub struct CharMap {
    bytes: Vec<usize>,
}

impl CharMap {
    pub fn new(text: &str) -> Self {
        let mut bytes: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        bytes.push(text.len());
        Self { bytes }
    }

    /// Number of characters.
    pub fn len(&self) -> usize {
        self.bytes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte(&self, char_offset: usize) -> Option<usize> {
        self.bytes.get(char_offset).copied()
    }

    pub fn slice<'a>(&self, text: &'a str, start: usize, end: usize) -> Option<&'a str> {
        if start > end {
            return None;
        }
        Some(&text[self.byte(start)?..self.byte(end)?])
    }
}
