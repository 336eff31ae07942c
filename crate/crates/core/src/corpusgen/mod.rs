//! Deterministic synthetic clinical notes with gold PHI spans.
//!
//! Each PHI mention is produced by one template with a single slot, so the
//! class of every span is drawn exactly once from the configured
//! proportions. With augmentation, mentions land in header and footer
//! blocks with probability `augmented_fraction`; the region mask then marks
//! the narrative body as real text.

mod lexicon;

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{EvalError, RegionMask};
use crate::ingest::{read_corpus_dir, write_corpus_dir, AnnotatedDocument, IngestError, PhiSpan};

use lexicon::{templates, Lexicon, FILLERS};

/// Thirteen frequent classes, the default subset.
pub const DEFAULT_CLASSES: [&str; 13] = [
    "NOMBRE_SUJETO_ASISTENCIA",
    "NOMBRE_PERSONAL_SANITARIO",
    "EDAD_SUJETO_ASISTENCIA",
    "SEXO_SUJETO_ASISTENCIA",
    "FECHAS",
    "CALLE",
    "TERRITORIO",
    "PAIS",
    "HOSPITAL",
    "CORREO_ELECTRONICO",
    "NUMERO_TELEFONO",
    "ID_SUJETO_ASISTENCIA",
    "ID_TITULACION_PERSONAL_SANITARIO",
];

#[derive(Debug, thiserror::Error)]
pub enum CorpusGenError {
    #[error("generator needs at least one PHI class")]
    EmptyClasses,
    #[error("no templates for class `{0}`")]
    UnknownClass(String),
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub documents: usize,
    pub classes: Vec<String>,
    /// Relative class proportions, parallel to `classes`; uniform if absent.
    pub weights: Option<Vec<f64>>,
    pub augmentation: bool,
    /// Probability that a mention is placed in the header or footer.
    pub augmented_fraction: f64,
    /// Inclusive range of PHI mentions per document.
    pub phi_per_doc: (usize, usize),
    /// Inclusive range of PHI-free narrative sentences per document.
    pub fillers_per_doc: (usize, usize),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            documents: 200,
            classes: DEFAULT_CLASSES.iter().map(|c| c.to_string()).collect(),
            weights: None,
            augmentation: true,
            augmented_fraction: 0.85,
            phi_per_doc: (8, 16),
            fillers_per_doc: (2, 5),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), CorpusGenError> {
        if self.classes.is_empty() {
            return Err(CorpusGenError::EmptyClasses);
        }
        for c in &self.classes {
            if templates(c).is_none() {
                return Err(CorpusGenError::UnknownClass(c.clone()));
            }
        }
        let bad = |m: String| Err(CorpusGenError::Config(m));
        if let Some(w) = &self.weights {
            if w.len() != self.classes.len()
                || w.iter().any(|x| !(x.is_finite() && *x >= 0.0))
                || w.iter().sum::<f64>() <= 0.0
            {
                return bad(format!("weights {w:?} do not match {} classes", self.classes.len()));
            }
        }
        if !(0.0..=1.0).contains(&self.augmented_fraction) {
            return bad("augmented_fraction must lie in [0, 1]".into());
        }
        if self.phi_per_doc.0 > self.phi_per_doc.1 || self.fillers_per_doc.0 > self.fillers_per_doc.1 {
            return bad("ranges must satisfy min <= max".into());
        }
        if self.documents == 0 {
            return bad("documents must be positive".into());
        }
        Ok(())
    }
}

/// Train/dev/test documents plus the real-text mask of every document.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<AnnotatedDocument>,
    pub dev: Vec<AnnotatedDocument>,
    pub test: Vec<AnnotatedDocument>,
    pub masks: RegionMask,
}

pub const MASK_FILE: &str = "masks.tsv";

impl Corpus {
    pub fn all(&self) -> impl Iterator<Item = &AnnotatedDocument> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// `dir/{train,dev,test}/` in standoff layout plus `dir/masks.tsv`.
    pub fn write(&self, dir: &Path) -> Result<(), CorpusGenError> {
        for (name, docs) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            write_corpus_dir(&dir.join(name), docs)?;
        }
        self.masks.write(&dir.join(MASK_FILE))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CorpusGenError> {
        let mask_path = dir.join(MASK_FILE);
        Ok(Self {
            train: read_corpus_dir(&dir.join("train"))?,
            dev: read_corpus_dir(&dir.join("dev"))?,
            test: read_corpus_dir(&dir.join("test"))?,
            masks: if mask_path.exists() {
                RegionMask::read(&mask_path)?
            } else {
                RegionMask::default()
            },
        })
    }
}

/// Accumulates text while tracking character offsets of inserted PHI.
#[derive(Default)]
struct DocBuilder {
    text: String,
    chars: usize,
    spans: Vec<PhiSpan>,
}

impl DocBuilder {
    fn push(&mut self, s: &str) {
        self.text.push_str(s);
        self.chars += s.chars().count();
    }

    fn push_template(&mut self, template: &str, value: &str, class: &str) {
        let (before, after) = template.split_once("{}").expect("template has one slot");
        self.push(before);
        let start = self.chars;
        self.push(value);
        self.spans.push(PhiSpan {
            start,
            end: self.chars,
            label: class.to_string(),
            text: value.to_string(),
        });
        self.push(after);
    }
}

struct Mention {
    class: usize,
    value: String,
    template: &'static str,
}

/// Generates the corpus described by `config`; identical configs give
/// identical corpora.
pub fn generate(config: &GeneratorConfig) -> Result<Corpus, CorpusGenError> {
    config.validate()?;
    let lex = Lexicon::load();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = config
        .weights
        .clone()
        .unwrap_or_else(|| vec![1.0; config.classes.len()]);
    let dist = WeightedIndex::new(&weights).map_err(|e| CorpusGenError::Config(e.to_string()))?;
    let tpl: Vec<_> = config
        .classes
        .iter()
        .map(|c| templates(c).expect("validated"))
        .collect();

    let width = config.documents.to_string().len().max(4);
    let mut docs = Vec::with_capacity(config.documents);
    let mut masks = RegionMask::default();
    for i in 0..config.documents {
        let doc_id = format!("doc{:0width$}", i + 1);
        let n_phi = rng.gen_range(config.phi_per_doc.0..=config.phi_per_doc.1);
        let (mut header, mut body, mut footer) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n_phi {
            let class = dist.sample(&mut rng);
            let value = lex.sample(&config.classes[class], &mut rng).expect("validated class");
            let augmented = config.augmentation && rng.gen_bool(config.augmented_fraction);
            let (fields, sentences) = tpl[class];
            let list = if augmented { fields } else { sentences };
            let mention = Mention {
                class,
                value,
                template: list.choose(&mut rng).expect("non-empty templates"),
            };
            match (augmented, rng.gen_bool(0.5)) {
                (true, true) => header.push(mention),
                (true, false) => footer.push(mention),
                (false, _) => body.push(Some(mention)),
            }
        }
        let n_fill = rng.gen_range(config.fillers_per_doc.0..=config.fillers_per_doc.1);
        body.extend((0..n_fill).map(|_| None));
        body.shuffle(&mut rng);
        let fillers: Vec<&str> = body
            .iter()
            .filter(|m| m.is_none())
            .map(|_| *FILLERS.choose(&mut rng).expect("non-empty"))
            .collect();

        let mut b = DocBuilder::default();
        let emit_block = |b: &mut DocBuilder, block: &[Mention]| {
            for (k, m) in block.iter().enumerate() {
                if k > 0 {
                    b.push("\n");
                }
                b.push_template(m.template, &m.value, &config.classes[m.class]);
            }
        };
        if !header.is_empty() {
            emit_block(&mut b, &header);
            b.push("\n\n");
        }
        let body_start = b.chars;
        let mut fill = fillers.into_iter();
        for (k, m) in body.iter().enumerate() {
            if k > 0 {
                b.push(" ");
            }
            match m {
                Some(m) => b.push_template(m.template, &m.value, &config.classes[m.class]),
                None => b.push(fill.next().expect("one filler per slot")),
            }
        }
        let body_end = b.chars;
        if !footer.is_empty() {
            b.push("\n\n");
            emit_block(&mut b, &footer);
        }
        b.push("\n");
        if config.augmentation {
            if body_end > body_start {
                masks.insert(doc_id.clone(), body_start, body_end);
            }
        } else {
            masks.insert(doc_id.clone(), 0, b.chars);
        }
        let mut doc = AnnotatedDocument::new(doc_id, b.text);
        doc.spans = b.spans;
        doc.spans.sort();
        doc.validate()?;
        docs.push(doc);
    }

    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng);
    let n_train = (docs.len() as f64 * 0.7).round() as usize;
    let n_dev = (docs.len() as f64 * 0.15).round() as usize;
    let mut slots: Vec<Option<AnnotatedDocument>> = docs.into_iter().map(Some).collect();
    let mut take = |range: &[usize]| -> Vec<AnnotatedDocument> {
        let mut v: Vec<_> = range
            .iter()
            .map(|&i| slots[i].take().expect("each index once"))
            .collect();
        v.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        v
    };
    let train = take(&order[..n_train]);
    let dev = take(&order[n_train..(n_train + n_dev).min(order.len())]);
    let test = take(&order[(n_train + n_dev).min(order.len())..]);
    Ok(Corpus {
        train,
        dev,
        test,
        masks,
    })
}

/// Fraction of spans lying outside the real-text regions.
pub fn augmented_span_fraction(corpus: &Corpus) -> f64 {
    let (mut outside, mut total) = (0usize, 0usize);
    for d in corpus.all() {
        let regions = corpus.masks.regions.get(&d.doc_id);
        for s in &d.spans {
            total += 1;
            let inside = regions.is_some_and(|r| r.iter().any(|&(a, b)| a <= s.start && s.end <= b));
            outside += usize::from(!inside);
        }
    }
    if total == 0 {
        0.0
    } else {
        outside as f64 / total as f64
    }
}
