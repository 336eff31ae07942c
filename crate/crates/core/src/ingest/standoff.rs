//! brat standoff text-bound annotations: `T<k>\t<LABEL> <start> <end>\t<surface>`.

use super::{normalize_newlines, AnnotatedDocument, CharMap, IngestError, PhiSpan};

/// Annotation kinds we read past without interpreting (notes, attributes,
/// relations, events, normalizations, equivalences).
const IGNORED_PREFIXES: [char; 7] = ['#', 'A', 'R', 'E', 'N', 'M', '*'];

fn surface_key(s: &str) -> String {
    normalize_newlines(s).replace('\n', " ")
}

/// Parses a `.txt`/`.ann` pair into a validated document with spans sorted by
/// start offset.
pub fn parse_standoff(doc_id: &str, text_content: &str, ann_content: &str) -> Result<AnnotatedDocument, IngestError> {
    let mut doc = AnnotatedDocument::new(doc_id, text_content);
    let map = CharMap::new(&doc.text);
    let mut ids = Vec::new();

    for (i, raw) in ann_content.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with(IGNORED_PREFIXES) {
            continue;
        }
        let malformed = |message: &str| IngestError::Malformed {
            line: line_no,
            message: message.to_string(),
        };
        if !line.starts_with('T') {
            return Err(malformed("expected a text-bound annotation `T<k>`"));
        }
        let mut fields = line.splitn(3, '\t');
        let id = fields.next().unwrap_or_default();
        let body = fields
            .next()
            .ok_or_else(|| malformed("missing tab after annotation id"))?;
        let surface = fields.next().ok_or_else(|| malformed("missing surface text field"))?;
        if id.len() < 2 || !id[1..].chars().all(|c| c.is_ascii_digit()) {
            return Err(malformed(&format!("bad annotation id `{id}`")));
        }
        let (label, offsets) = body
            .split_once(' ')
            .ok_or_else(|| malformed("expected `LABEL start end`"))?;
        if offsets.contains(';') {
            return Err(IngestError::Discontinuous {
                line: line_no,
                offsets: offsets.to_string(),
            });
        }
        let mut nums = offsets.split(' ');
        let parse = |s: Option<&str>| -> Result<usize, IngestError> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| malformed(&format!("bad offsets `{offsets}`")))
        };
        let start = parse(nums.next())?;
        let end = parse(nums.next())?;
        if nums.next().is_some() || label.is_empty() {
            return Err(malformed("expected `LABEL start end`"));
        }
        if start >= end || end > map.len() {
            return Err(IngestError::OutOfBounds {
                id: id.to_string(),
                start,
                end,
                len: map.len(),
            });
        }
        let found = map.slice(&doc.text, start, end).expect("bounds checked");
        if surface_key(found) != surface_key(surface) {
            return Err(IngestError::TextMismatch {
                id: id.to_string(),
                expected: surface.to_string(),
                found: found.to_string(),
            });
        }
        doc.spans.push(PhiSpan {
            start,
            end,
            label: label.to_string(),
            text: found.to_string(),
        });
        ids.push((start, end, id.to_string()));
    }

    doc.spans.sort();
    ids.sort();
    for w in ids.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(IngestError::Overlap {
                first: w[0].2.clone(),
                second: w[1].2.clone(),
            });
        }
    }
    Ok(doc)
}

/// Serializes spans as `T1..Tn` in span order, one line each. Newlines inside
/// a surface string are written as spaces.
pub fn write_standoff(doc: &AnnotatedDocument) -> String {
    doc.spans
        .iter()
        .enumerate()
        .map(|(i, s)| {
            format!(
                "T{}\t{} {} {}\t{}",
                i + 1,
                s.label,
                s.start,
                s.end,
                s.text.replace('\n', " ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}
