//! Regular-expression rules for web addresses and network identifiers that
//! override neural predictions.
//!
//! Matches from all rules are resolved leftmost-longest into maximal,
//! non-overlapping spans. A match must not be glued to a word character on
//! either side, and trailing sentence punctuation is not part of a match.
//! Any neural span overlapping a rule span is dropped.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::ingest::{AnnotatedDocument, PhiSpan};
use crate::tagger::LabelInventory;

#[derive(Debug, thiserror::Error)]
pub enum PostprocessError {
    #[error("rule `{name}`: {source}")]
    Pattern {
        name: String,
        #[source]
        source: Box<regex::Error>,
    },
    #[error("rule `{name}` targets class `{class}`, which is not in the label inventory")]
    UnknownClass { name: String, class: String },
    #[error("duplicate rule name `{0}`")]
    DuplicateName(String),
}

/// Serialized form of a rule: `(name, pattern, class)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub name: String,
    pub pattern: String,
    pub class: String,
}

#[derive(Debug, Clone)]
struct Rule {
    spec: RuleSpec,
    regex: Regex,
}

/// Ordered, compiled rules. Earlier rules win ties between equally long
/// matches at the same position.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<RuleSpec>", into = "Vec<RuleSpec>")]
pub struct RuleSet {
    rules: Vec<Rule>,
}

const HEX: &str = "[0-9A-Fa-f]";

fn ipv6_pattern() -> String {
    let g = format!("{HEX}{{1,4}}");
    let groups = format!("{g}(?::{g}){{0,6}}");
    format!("{g}(?::{g}){{7}}|{groups}::(?:{groups})?|::{groups}")
}

pub fn default_rule_specs() -> Vec<RuleSpec> {
    let spec = |name: &str, pattern: String, class: &str| RuleSpec {
        name: name.into(),
        pattern,
        class: class.into(),
    };
    let octet = "(?:25[0-5]|2[0-4][0-9]|1[0-9][0-9]|[1-9]?[0-9])";
    let pair = format!("{HEX}{{2}}");
    vec![
        spec(
            "url",
            r"(?i:(?:https?|ftp)://\S+|www\.[a-z0-9-]+(?:\.[a-z0-9-]+)+(?:/\S*)?)".into(),
            "URL_WEB",
        ),
        spec("ipv4", format!(r"{octet}(?:\.{octet}){{3}}"), "DIREC_PROT_INTERNET"),
        spec("ipv6", ipv6_pattern(), "DIREC_PROT_INTERNET"),
        spec(
            "mac",
            format!("{pair}(?::{pair}){{5}}|{pair}(?:-{pair}){{5}}"),
            "DIREC_PROT_INTERNET",
        ),
    ]
}

impl Default for RuleSet {
    fn default() -> Self {
        Self::new(default_rule_specs()).expect("default rules compile")
    }
}

impl TryFrom<Vec<RuleSpec>> for RuleSet {
    type Error = PostprocessError;

    fn try_from(specs: Vec<RuleSpec>) -> Result<Self, Self::Error> {
        Self::new(specs)
    }
}

impl From<RuleSet> for Vec<RuleSpec> {
    fn from(r: RuleSet) -> Self {
        r.rules.into_iter().map(|r| r.spec).collect()
    }
}

impl PartialEq for RuleSet {
    fn eq(&self, other: &Self) -> bool {
        self.specs().eq(other.specs())
    }
}

impl RuleSet {
    pub fn new(specs: Vec<RuleSpec>) -> Result<Self, PostprocessError> {
        let mut rules: Vec<Rule> = Vec::with_capacity(specs.len());
        for spec in specs {
            if rules.iter().any(|r| r.spec.name == spec.name) {
                return Err(PostprocessError::DuplicateName(spec.name));
            }
            let regex = Regex::new(&spec.pattern).map_err(|e| PostprocessError::Pattern {
                name: spec.name.clone(),
                source: Box::new(e),
            })?;
            rules.push(Rule { spec, regex });
        }
        Ok(Self { rules })
    }

    pub fn empty() -> Self {
        Self { rules: Vec::new() }
    }

    pub fn specs(&self) -> impl Iterator<Item = &RuleSpec> {
        self.rules.iter().map(|r| &r.spec)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Every target class must have B/I labels in `labels`.
    pub fn check_classes(&self, labels: &LabelInventory) -> Result<(), PostprocessError> {
        let known = labels.classes();
        for r in &self.rules {
            if !known.iter().any(|c| c == &r.spec.class) {
                return Err(PostprocessError::UnknownClass {
                    name: r.spec.name.clone(),
                    class: r.spec.class.clone(),
                });
            }
        }
        Ok(())
    }

    /// Maximal non-overlapping rule matches in `text`, as char-offset spans.
    pub fn matches(&self, text: &str) -> Vec<PhiSpan> {
        // (byte start, byte end, rule index)
        let mut found = Vec::new();
        for (k, rule) in self.rules.iter().enumerate() {
            for m in rule.regex.find_iter(text) {
                let end = m.start() + trim_trailing(m.as_str());
                if end > m.start() && on_boundary(text, m.start(), end) {
                    found.push((m.start(), end, k));
                }
            }
        }
        found.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        let mut kept: Vec<(usize, usize, usize)> = Vec::new();
        for m in found {
            if kept.last().is_none_or(|last| m.0 >= last.1) {
                kept.push(m);
            }
        }
        let mut chars = CharIndex::new(text);
        kept.into_iter()
            .map(|(s, e, k)| PhiSpan {
                start: chars.at(s),
                end: chars.at(e),
                label: self.rules[k].spec.class.clone(),
                text: text[s..e].to_string(),
            })
            .collect()
    }
}

/// Byte length of `s` without trailing sentence punctuation.
fn trim_trailing(s: &str) -> usize {
    s.trim_end_matches(['.', ',', ';', '!', '?', ')', ']', '}', '"', '\'', '»'])
        .len()
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn on_boundary(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    !before.is_some_and(is_word) && !after.is_some_and(is_word)
}

/// Incremental byte-to-char offset conversion for ascending queries.
struct CharIndex<'a> {
    text: &'a str,
    byte: usize,
    char: usize,
}

impl<'a> CharIndex<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, byte: 0, char: 0 }
    }

    fn at(&mut self, byte: usize) -> usize {
        if byte < self.byte {
            self.byte = 0;
            self.char = 0;
        }
        self.char += self.text[self.byte..byte].chars().count();
        self.byte = byte;
        self.char
    }
}

/// Adds every rule match as a span and removes neural spans overlapping any
/// of them. Output spans are sorted.
pub fn apply_rules(doc: &AnnotatedDocument, rules: &RuleSet) -> AnnotatedDocument {
    let forced = rules.matches(&doc.text);
    if forced.is_empty() {
        return doc.clone();
    }
    let mut spans: Vec<PhiSpan> = doc
        .spans
        .iter()
        .filter(|s| !forced.iter().any(|f| f.overlaps(s)))
        .cloned()
        .collect();
    spans.extend(forced);
    spans.sort();
    doc.with_spans_replaced(spans)
}
